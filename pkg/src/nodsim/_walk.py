"""Compiled kernel for the request dissemination walk.

The walk is a pure function of its array inputs and a buffer of uniform
draws; ``registry.reference_walk`` is an interpreted twin used to check it.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def walk_kernel(loc, indptr, indices, alive, static_ok, free, targets, radius, start, uniforms):
    """Run one dissemination walk.

    ``static_ok`` is what the ledger tells about a device (type, capacity,
    availability, reputation, ask); ``free`` is only learned by visiting.
    Returns ``(assignment, visited, success)``; ``assignment[j]`` is the
    device that claimed target ``j`` or -1.
    """
    n = loc.shape[0]
    n_targets = targets.shape[0]
    r2 = radius * radius

    candidate = np.zeros((n, n_targets), dtype=np.bool_)
    open_targets = np.zeros(n, dtype=np.int64)
    joinable = np.zeros(n_targets, dtype=np.int64)
    for i in range(n):
        if not (static_ok[i] and alive[i]):
            continue
        for j in range(n_targets):
            dx = loc[i, 0] - targets[j, 0]
            dy = loc[i, 1] - targets[j, 1]
            if dx * dx + dy * dy <= r2:
                candidate[i, j] = True
                open_targets[i] += 1
                if free[i]:
                    joinable[j] += 1

    assignment = np.full(n_targets, -1, dtype=np.int64)
    for j in range(n_targets):
        if joinable[j] == 0:
            return assignment, n, False

    visited = np.zeros(n, dtype=np.bool_)
    n_left = 0
    for i in range(n):
        if alive[i]:
            n_left += 1
    unfilled = n_targets
    count = 0
    draw = 0
    cur = start
    while True:
        visited[cur] = True
        n_left -= 1
        count += 1
        best_j = -1
        best_d = np.inf
        for j in range(n_targets):
            if candidate[cur, j] and free[cur]:
                joinable[j] -= 1
                if assignment[j] < 0:
                    dx = loc[cur, 0] - targets[j, 0]
                    dy = loc[cur, 1] - targets[j, 1]
                    d = dx * dx + dy * dy
                    if d < best_d:
                        best_d = d
                        best_j = j
        if best_j >= 0:
            assignment[best_j] = cur
            unfilled -= 1
            if unfilled == 0:
                return assignment, count, True
            for i in range(n):
                if candidate[i, best_j]:
                    open_targets[i] -= 1
        # an unfilled target with no joinable device left can never be filled
        for j in range(n_targets):
            if assignment[j] < 0 and joinable[j] == 0:
                return assignment, n, False
        if n_left == 0:
            return assignment, n, False

        # head for the closest unvisited device the ledger says could join
        goal = -1
        goal_d = np.inf
        for i in range(n):
            if open_targets[i] > 0 and not visited[i]:
                dx = loc[i, 0] - loc[cur, 0]
                dy = loc[i, 1] - loc[cur, 1]
                d = dx * dx + dy * dy
                if d < goal_d:
                    goal_d = d
                    goal = i
        nxt = -1
        nxt_d = np.inf
        for k in range(indptr[cur], indptr[cur + 1]):
            v = indices[k]
            if visited[v] or not alive[v]:
                continue
            dx = loc[v, 0] - loc[goal, 0]
            dy = loc[v, 1] - loc[goal, 1]
            d = dx * dx + dy * dy
            if d < nxt_d:
                nxt_d = d
                nxt = v
        if nxt < 0:
            # dead end: the broker re-seeds at a random unvisited device
            pick = int(uniforms[draw] * n_left)
            draw += 1
            if pick >= n_left:
                pick = n_left - 1
            for v in range(n):
                if alive[v] and not visited[v]:
                    if pick == 0:
                        nxt = v
                        break
                    pick -= 1
        cur = nxt
