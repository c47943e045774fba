"""Brute-force reference computations, written independently of the engine."""

import math


def uct_walk(root, w):
    """Recompute the selection path by scoring every child at every level."""
    path = [root]
    node = root
    while node.children and not node.is_terminal:
        kids = list(node.children)
        fresh = [i for i, c in enumerate(kids) if c.visits == 0]
        if fresh:
            # best logprob, earliest on ties
            best = max(fresh, key=lambda i: (kids[i].fragment_logprob, -i))
        else:
            ln_parent = math.log(node.visits) if node.visits > 0 else 0.0
            scores = [c.q_value + w * math.sqrt(ln_parent) / c.visits for c in kids]
            top = max(scores)
            tied = [i for i, s in enumerate(scores) if s == top]
            best_lp = max(kids[i].fragment_logprob for i in tied)
            best = min(i for i in tied if kids[i].fragment_logprob == best_lp)
        node = kids[best]
        path.append(node)
    return path


def backup_values(nodes, rollouts):
    """Q and visit count per node from the full rollout history.

    ``rollouts`` is a list of (path, leaf_q).  A node's value is the best,
    over every rollout through it, of the mean along that rollout's path from
    the node down to its end, with interior nodes valued at their prior and
    the end at leaf_q.  Nodes no rollout touched keep their prior.
    """
    q = {id(n): n.reward for n in nodes}
    visits = {id(n): 0 for n in nodes}
    best = {}
    for path, leaf_q in rollouts:
        for k, node in enumerate(path):
            tail = path[k:]
            vals = [m.reward for m in tail[:-1]] + [leaf_q]
            mean = math.fsum(vals) / len(vals)
            best[id(node)] = max(best.get(id(node), -math.inf), mean)
            visits[id(node)] += 1
    q.update(best)
    return q, visits


def random_select_tree(rng, max_levels=5, max_children=4):
    """A tree with small discrete Q, N and logprob values so ties are common."""
    from sqlsearch.search import SearchNode

    root = SearchNode("ctx")
    root.visits = rng.choice([0, 1, 2, 3, 7, 20])
    stack = [root]
    while stack:
        node = stack.pop()
        if node.depth >= max_levels - 1:
            continue
        for _ in range(rng.randint(0, max_children)):
            child = SearchNode("ctx", fragment_logprob=rng.choice([-0.1, -0.5, -1.0]),
                               depth=node.depth + 1, parent=node)
            child.q_value = rng.choice([0.5, 1.0, 1.5, 2.0])
            child.visits = rng.choice([0, 1, 1, 2, 3, 5])
            child.is_terminal = rng.random() < 0.1
            node.children.append(child)
            stack.append(child)
    return root


def random_backup_tree(rng, max_nodes=50):
    from sqlsearch.search import SearchNode

    root = SearchNode("ctx")
    nodes = [root]
    for _ in range(rng.randint(0, max_nodes - 1)):
        parent = rng.choice(nodes)
        child = SearchNode("ctx", reward=rng.uniform(-5, 100), depth=parent.depth + 1, parent=parent)
        parent.children.append(child)
        nodes.append(child)
    return root, nodes
