# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops.  Signatures mirror ``aiectr._pykernels`` exactly."""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def scatter_add_rows(double[:, ::1] out, const cnp.int64_t[::1] idx, const double[:, ::1] src):
    cdef Py_ssize_t n = idx.shape[0], d = src.shape[1], i, j, r
    for i in range(n):
        r = idx[i]
        for j in range(d):
            out[r, j] += src[i, j]


cdef inline void _fw_add(cnp.int64_t[::1] tree, Py_ssize_t pos) nogil:
    cdef Py_ssize_t n = tree.shape[0]
    pos += 1
    while pos <= n:
        tree[pos - 1] += 1
        pos += pos & (-pos)


cdef inline cnp.int64_t _fw_prefix(cnp.int64_t[::1] tree, Py_ssize_t pos) nogil:
    # sum over ranks [0, pos]
    cdef cnp.int64_t s = 0
    pos += 1
    while pos > 0:
        s += tree[pos - 1]
        pos -= pos & (-pos)
    return s


def dominance_counts(const double[::1] key, const cnp.int64_t[::1] rank, Py_ssize_t n_ranks):
    """For every i: below[i] = #{j: key_j < key_i, rank_j <= rank_i};
    above[i] = #{j: key_j > key_i, rank_j >= rank_i}."""
    cdef Py_ssize_t n = key.shape[0], a, b, k, i
    order_np = np.argsort(np.asarray(key), kind="stable")
    cdef cnp.int64_t[::1] order = order_np.astype(np.int64)
    below_np = np.zeros(n, dtype=np.int64)
    above_np = np.zeros(n, dtype=np.int64)
    cdef cnp.int64_t[::1] below = below_np
    cdef cnp.int64_t[::1] above = above_np
    cdef cnp.int64_t[::1] tree = np.zeros(max(n_ranks, 1), dtype=np.int64)
    cdef cnp.int64_t inserted

    with nogil:
        a = 0
        while a < n:
            b = a
            while b < n and key[order[b]] == key[order[a]]:
                b += 1
            for k in range(a, b):
                i = order[k]
                below[i] = _fw_prefix(tree, rank[i])
            for k in range(a, b):
                _fw_add(tree, rank[order[k]])
            a = b

        tree[:] = 0
        inserted = 0
        a = n - 1
        while a >= 0:
            b = a
            while b >= 0 and key[order[b]] == key[order[a]]:
                b -= 1
            for k in range(a, b, -1):
                i = order[k]
                if rank[i] > 0:
                    above[i] = inserted - _fw_prefix(tree, rank[i] - 1)
                else:
                    above[i] = inserted
            for k in range(a, b, -1):
                _fw_add(tree, rank[order[k]])
                inserted += 1
            a = b
    return below_np, above_np


def group_argmax(const cnp.int64_t[::1] group, const double[::1] score, Py_ssize_t n_groups):
    """Index of the max score per group; ties go to the lowest index; -1 for empty groups."""
    cdef Py_ssize_t n = group.shape[0], i, g
    best_np = np.full(n_groups, -1, dtype=np.int64)
    cdef cnp.int64_t[::1] best = best_np
    with nogil:
        for i in range(n):
            g = group[i]
            if best[g] < 0 or score[i] > score[best[g]]:
                best[g] = i
    return best_np
