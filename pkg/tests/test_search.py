import math
import random

import pytest

import oracles
import suite
from sqlsearch.errors import ConfigError, DeadEnd
from sqlsearch.policy import PolicyConfig, ScriptedPolicy
from sqlsearch.pruning import PruningConfig
from sqlsearch.schema_env import QueryTask, SqlEnv, serialize_context
from sqlsearch.search import (
    RewardBreakdown,
    SearchConfig,
    SearchNode,
    SearchStats,
    backpropagate,
    expand,
    greedy_decode,
    run_mcts,
    select,
    simulate,
    uct_score,
)

NO_PRUNE = PruningConfig(enabled=False)


def _child(parent, q, n, lp=-0.1):
    c = SearchNode("ctx", fragment_logprob=lp, depth=parent.depth + 1, parent=parent)
    c.q_value, c.visits = q, n
    parent.children.append(c)
    return c


def test_uct_example():
    root = SearchNode("ctx")
    root.visits = math.e
    a = _child(root, 1.0, 1)
    b = _child(root, 0.5, 1)
    assert uct_score(a, root.visits, 0.7) == pytest.approx(1.7)
    assert uct_score(b, root.visits, 0.7) == pytest.approx(1.2)
    assert select(root, 0.7) == [root, a]


def test_fewer_visits_wins_on_equal_q():
    root = SearchNode("ctx")
    root.visits = 4
    _child(root, 1.0, 3)
    fresh = _child(root, 1.0, 1)
    assert select(root, 0.7)[-1] is fresh


def test_unvisited_children_first_by_logprob():
    root = SearchNode("ctx")
    root.visits = 10
    _child(root, 99.0, 4)
    _child(root, 0.0, 0, lp=-1.0)
    best = _child(root, 0.0, 0, lp=-0.2)
    _child(root, 0.0, 0, lp=-0.2)
    assert select(root, 0.7)[-1] is best


def test_select_stops_at_terminal():
    root = SearchNode("ctx")
    root.visits = 1
    t = _child(root, 1.0, 0)
    t.is_terminal = True
    _child(t, 1.0, 0)
    assert select(root) == [root, t]


def test_select_matches_brute_force_walker():
    rng = random.Random(5)
    for _ in range(100):
        root = oracles.random_select_tree(rng, max_levels=4)
        w = rng.choice([0.0, 0.7, 1.3])
        assert select(root, w) == oracles.uct_walk(root, w)


def test_backprop_single_node():
    leaf = SearchNode("ctx")
    backpropagate([leaf], 4.0)
    assert (leaf.q_value, leaf.visits) == (4.0, 1)


def test_backprop_parent_takes_best_path_mean():
    root = SearchNode("ctx")
    parent = SearchNode("ctx", reward=4.0, depth=1, parent=root)
    a = SearchNode("ctx", reward=0.0, depth=2, parent=parent)
    b = SearchNode("ctx", reward=0.0, depth=2, parent=parent)
    parent.children = [a, b]
    backpropagate([parent, a], 2.0)   # path mean (4 + 2) / 2 = 3
    backpropagate([parent, b], 6.0)   # path mean (4 + 6) / 2 = 5
    assert parent.q_value == 5.0 and parent.visits == 2
    backpropagate([parent, a], 2.0)
    assert parent.q_value == 5.0 and parent.visits == 3


def test_backprop_matches_recomputation():
    rng = random.Random(9)
    for _ in range(50):
        root, nodes = oracles.random_backup_tree(rng)
        history = []
        for _ in range(rng.randint(1, 15)):
            path = rng.choice(nodes).path()
            leaf_q = rng.uniform(-1, 101)
            prev = {id(n): n.q_value for n in path if n.visits}
            backpropagate(path, leaf_q)
            history.append((path, leaf_q))
            for n in path:
                if id(n) in prev:
                    assert n.q_value >= prev[id(n)]
        q, visits = oracles.backup_values(nodes, history)
        for n in nodes:
            assert n.q_value == pytest.approx(q[id(n)], abs=1e-9)
            assert n.visits == visits[id(n)]


def _expand_policy(entries):
    return ScriptedPolicy({"": entries})


def _root():
    return SearchNode("-- Question: q\n-- SQL:\n")


def test_expand_dedupes_exact_duplicates():
    policy = _expand_policy([
        ["SELECT a FROM t", -0.1], ["SELECT a FROM u", -0.2], ["SELECT b ", -0.3],
        ["SELECT c ", -0.4], ["SELECT d ", -0.5],
    ])
    stats = SearchStats()
    kids = expand(_root(), policy, NO_PRUNE, SearchConfig(top_d=5), stats=stats)
    # the first two clip to the same "SELECT a "
    assert [k.fragment for k in kids] == ["SELECT a ", "SELECT b ", "SELECT c ", "SELECT d "]
    assert stats.candidates_scored == 4 and stats.nodes_created == 5


def test_expand_keeps_top_d():
    policy = _expand_policy([["SELECT a ", -0.4], ["SELECT b ", -0.1], ["SELECT c ", -0.3], ["SELECT d ", -0.2]])
    kids = expand(_root(), policy, NO_PRUNE, SearchConfig(top_d=3))
    assert [k.fragment for k in kids] == ["SELECT b ", "SELECT d ", "SELECT c "]
    assert [k.reward for k in kids] == pytest.approx([99.94, 99.88, 99.82])
    assert all(k.q_value == k.reward and k.visits == 0 and k.depth == 1 for k in kids)


def test_expand_jaccard_half_keeps_both():
    policy = _expand_policy([["SELECT user.id ", -0.1], ["SELECT user.name ", -0.2]])
    kids = expand(_root(), policy, NO_PRUNE, SearchConfig())
    assert [k.fragment for k in kids] == ["SELECT user.id ", "SELECT user.name "]


def test_expand_drops_near_duplicates():
    policy = _expand_policy([["SELECT a, b, c ", -0.1], ["SELECT a, b, c, d ", -0.2]])
    kids = expand(_root(), policy, NO_PRUNE, SearchConfig())
    # jaccard 4/5 = 0.8 >= 0.7
    assert [k.fragment for k in kids] == ["SELECT a, b, c "]


def test_expand_hard_phase_prunes_below_max():
    node = _root()
    node.depth = 5
    policy = ScriptedPolicy({"": [["WHERE a = 1 ", -0.1], ["ORDER BY b ", -0.9]]})
    stats = SearchStats()
    kids = expand(node, policy, PruningConfig(lam=0.9, t0=4), SearchConfig(), stats=stats)
    assert [k.fragment for k in kids] == ["WHERE a = 1 "]
    assert stats.candidates_pruned == 1


def test_expand_marks_terminal_children():
    policy = _expand_policy([["SELECT 1;", -0.1, True], ["SELECT a ", -0.2]])
    kids = expand(_root(), policy, NO_PRUNE, SearchConfig())
    assert kids[0].is_terminal and kids[0].ends_sequence
    assert not kids[1].is_terminal


def test_expand_dead_end():
    with pytest.raises(DeadEnd):
        expand(_root(), _expand_policy([]), NO_PRUNE, SearchConfig())


def test_blended_q_example():
    assert RewardBreakdown(94.0, 96.0, 1, 0.5).blended_q == pytest.approx(95.5)


@pytest.fixture
def env(concert_db):
    with SqlEnv(concert_db) as e:
        yield e


def _task(gold="SELECT COUNT(*) FROM stadium;", question="q"):
    return QueryTask("x", question, "concert_singer", gold)


def test_simulate_terminal_node_matching_gold(env):
    root = _root()
    node = SearchNode(root.context, "SELECT COUNT(*) FROM stadium;", "FROM stadium;", -0.5, 99.7, 2, root,
                      ends_sequence=True, is_terminal=True)
    policy = ScriptedPolicy({"": [["SELECT COUNT(*) ", -0.5]], "SELECT COUNT(*) ": [["FROM stadium;", -0.5, True]]})
    sql, br, complete = simulate(node, policy, env, _task(), SearchConfig())
    assert sql == "SELECT COUNT(*) FROM stadium;" and complete
    assert br.exec_reward == 1
    assert br.process_reward == pytest.approx(99.7)
    assert br.global_reward == pytest.approx(100 + 0.6 * -1.0)


def test_simulate_malformed_chain(env):
    policy = ScriptedPolicy({"": [["SELECT name ", -0.1]], "SELECT name ": [["FROM (singer;", -0.1, True]]})
    sql, br, complete = simulate(_root(), policy, env, _task(), SearchConfig())
    assert sql == "SELECT name FROM (singer;"
    assert not complete and br.exec_reward == -1


def test_simulate_runs_out_of_depth(env):
    policy = ScriptedPolicy({"": [["SELECT name ", -0.1]], "SELECT name ": [["FROM singer ", -0.1]],
                             "SELECT name FROM singer ": [["WHERE age > 1 ", -0.1]]})
    sql, br, complete = simulate(_root(), policy, env, _task(), SearchConfig(max_depth=2))
    assert sql == "SELECT name FROM singer " and br.exec_reward == -1


def test_simulate_dead_end_scores_minus_one(env):
    policy = ScriptedPolicy({"": [["SELECT name ", -0.1]]})
    _, br, complete = simulate(_root(), policy, env, _task(), SearchConfig())
    assert br.exec_reward == -1 and not complete


def test_config_rejects_zero_rollouts():
    with pytest.raises(ConfigError):
        SearchConfig(n_rollouts=0)
    with pytest.raises(ConfigError):
        SearchConfig.preset("spider", n_rollouts=0)
    with pytest.raises(ConfigError):
        SearchConfig.preset("nope")


def test_presets():
    s, b = SearchConfig.preset("spider"), SearchConfig.preset("bird")
    assert (s.n_rollouts, s.max_depth, s.exploration_weight) == (6, 8, 0.7)
    assert (b.n_rollouts, b.max_depth, b.exploration_weight) == (8, 12, 0.8)
    assert s.node_budget == 1 + 6 * 3 * 8


def _suite_task(tid):
    raw = next(t for t in suite.SUITE if t["id"] == tid)
    return QueryTask(raw["id"], raw["question"], "concert_singer", raw["gold"])


def _search(tid, concert_db, concert_schema, **overrides):
    config = SearchConfig.preset("spider", **overrides)
    with SqlEnv(concert_db) as env:
        return run_mcts(_suite_task(tid), concert_schema, suite.scripted_policy(), env, config)


def test_gold_first_found_in_one_rollout(concert_db, concert_schema):
    result = _search("t01", concert_db, concert_schema)
    assert result.final_sql == suite.SUITE[0]["gold"]
    assert result.exec_reward == 1 and result.early_stopped and result.stats.rollouts_used == 1


def test_search_beats_greedy_on_adversarial_task(concert_db, concert_schema):
    task = _suite_task("t02")
    greedy = greedy_decode(task, concert_schema, suite.scripted_policy())
    assert greedy.startswith("SELECT country")
    one = _search("t02", concert_db, concert_schema, n_rollouts=1)
    assert one.exec_reward != 1
    six = _search("t02", concert_db, concert_schema)
    assert six.final_sql == task.gold_sql and six.exec_reward == 1


def test_deep_adversarial_step_recovered(concert_db, concert_schema):
    result = _search("t03", concert_db, concert_schema)
    assert result.final_sql == _suite_task("t03").gold_sql


def test_search_is_deterministic(concert_db, concert_schema):
    a = _search("t05", concert_db, concert_schema, early_stop=False)
    b = _search("t05", concert_db, concert_schema, early_stop=False)
    assert a.final_sql == b.final_sql
    stats = lambda r: (r.stats.nodes_created, r.stats.rollouts_used, r.stats.candidates_scored,
                       r.stats.candidates_pruned, r.stats.expansions)
    assert stats(a) == stats(b)


def test_visit_accounting(concert_db, concert_schema):
    result = _search("t05", concert_db, concert_schema, early_stop=False)
    assert result.root.visits == result.stats.rollouts_used == 6
    for node in result.root.iter_nodes():
        assert node.visits >= sum(c.visits for c in node.children)
    assert result.stats.nodes_created == sum(1 for _ in result.root.iter_nodes())
    assert result.stats.nodes_created <= SearchConfig.preset("spider").node_budget


def test_blind_mode_never_early_stops(concert_db, concert_schema):
    result = _search("t01", concert_db, concert_schema, reward_mode="blind")
    assert not result.early_stopped and result.stats.rollouts_used == 6
    assert result.exec_reward in (-1, 0)


def test_fallback_when_every_rollout_fails(concert_db, concert_schema):
    policy = ScriptedPolicy({"": [["SELECT nme ", -0.1], ["SELECT nm ", -0.5]],
                             "SELECT nme ": [["FROM (singer;", -0.1, True]],
                             "SELECT nm ": [["FROM (singer;", -0.1, True]]})
    with SqlEnv(concert_db) as env:
        result = run_mcts(_task(), concert_schema, policy, env, SearchConfig(n_rollouts=3))
    assert result.fallback and result.final_sql == "SELECT nme FROM (singer;"


def test_dead_end_root(concert_db, concert_schema):
    with SqlEnv(concert_db) as env:
        result = run_mcts(_task(), concert_schema, ScriptedPolicy({}), env, SearchConfig(n_rollouts=2))
    assert result.fallback and result.final_sql == "" and result.stats.dead_ends == 1


def _affine_run(tid, concert_db, concert_schema, alpha, beta):
    config = SearchConfig.preset("spider", reward_mode="blind", exploration_weight=0.0, early_stop=False)
    pc = PolicyConfig(alpha=alpha, beta=beta)
    with SqlEnv(concert_db) as env:
        return run_mcts(_suite_task(tid), concert_schema, suite.scripted_policy(), env, config, pc, NO_PRUNE)


def test_affine_reward_stability(concert_db, concert_schema):
    for tid in ("t02", "t05", "t08"):
        base = _affine_run(tid, concert_db, concert_schema, 0.6, 100.0)
        shape = lambda r: [[c.fragment for c in n.children] for n in r.root.iter_nodes()]
        for alpha, beta in ((1.2, 100.0), (0.3, 250.0), (2.4, 40.0)):
            other = _affine_run(tid, concert_db, concert_schema, alpha, beta)
            assert other.final_sql == base.final_sql
            assert shape(other) == shape(base)
