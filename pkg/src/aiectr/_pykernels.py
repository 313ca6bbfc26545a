"""Pure-Python/numpy versions of the compiled kernels in ``_ckernels.pyx``."""
from __future__ import annotations

import numpy as np


def scatter_add_rows(out: np.ndarray, idx: np.ndarray, src: np.ndarray) -> None:
    np.add.at(out, idx, src)


def _fw_add(tree, pos):
    n = len(tree)
    pos += 1
    while pos <= n:
        tree[pos - 1] += 1
        pos += pos & (-pos)


def _fw_prefix(tree, pos):
    s = 0
    pos += 1
    while pos > 0:
        s += tree[pos - 1]
        pos -= pos & (-pos)
    return s


def dominance_counts(key: np.ndarray, rank: np.ndarray, n_ranks: int):
    """below[i] = #{j: key_j < key_i, rank_j <= rank_i};
    above[i] = #{j: key_j > key_i, rank_j >= rank_i}."""
    n = len(key)
    order = np.argsort(key, kind="stable").tolist()
    keys = key.tolist()
    ranks = rank.tolist()
    below = [0] * n
    above = [0] * n

    tree = [0] * max(n_ranks, 1)
    a = 0
    while a < n:
        b = a
        while b < n and keys[order[b]] == keys[order[a]]:
            b += 1
        for k in range(a, b):
            i = order[k]
            below[i] = _fw_prefix(tree, ranks[i])
        for k in range(a, b):
            _fw_add(tree, ranks[order[k]])
        a = b

    tree = [0] * max(n_ranks, 1)
    inserted = 0
    a = n - 1
    while a >= 0:
        b = a
        while b >= 0 and keys[order[b]] == keys[order[a]]:
            b -= 1
        for k in range(a, b, -1):
            i = order[k]
            r = ranks[i]
            above[i] = inserted - (_fw_prefix(tree, r - 1) if r > 0 else 0)
        for k in range(a, b, -1):
            _fw_add(tree, ranks[order[k]])
            inserted += 1
        a = b
    return np.array(below, dtype=np.int64), np.array(above, dtype=np.int64)


def group_argmax(group: np.ndarray, score: np.ndarray, n_groups: int) -> np.ndarray:
    best = np.full(n_groups, -1, dtype=np.int64)
    if len(group) == 0:
        return best
    # within a group: highest score first, then lowest index
    order = np.lexsort((np.arange(len(group)), -score, group))
    g_sorted = group[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = g_sorted[1:] != g_sorted[:-1]
    best[g_sorted[first]] = order[first]
    return best
