"""Compiled inner loops: grid ray traversal, disc collision, lattice search.

Grids are indexed ``[row, col]`` with ``row = floor(y / cell)`` and
``col = floor(x / cell)``. Label grids use -1 for free, 0 for wall and
``k + 1`` for object ``k``.
"""
from __future__ import annotations

import heapq
import math

import numpy as np
from numba import njit

INF = math.inf


@njit(cache=True)
def _boundary_t(idx, step, origin, direction, cell):
    if step == 0:
        return INF
    edge = (idx + 1) * cell if step > 0 else idx * cell
    t = (edge - origin) / direction
    return t if t > 0.0 else 0.0


@njit(cache=True)
def cast_rays(labels, x, y, dirs_x, dirs_y, max_range, cell):
    """First blocked cell along each ray; range is the entry distance."""
    n = dirs_x.shape[0]
    nrows, ncols = labels.shape
    ranges = np.full(n, INF)
    hit_label = np.full(n, -1, np.int64)
    hit_row = np.full(n, -1, np.int64)
    hit_col = np.full(n, -1, np.int64)
    for i in range(n):
        dx = dirs_x[i]
        dy = dirs_y[i]
        sx = 1 if dx > 0 else (-1 if dx < 0 else 0)
        sy = 1 if dy > 0 else (-1 if dy < 0 else 0)
        col = int(math.floor(x / cell))
        row = int(math.floor(y / cell))
        t_enter = 0.0
        while True:
            if row < 0 or row >= nrows or col < 0 or col >= ncols:
                break
            if t_enter >= max_range:
                break
            lab = labels[row, col]
            if lab >= 0:
                ranges[i] = t_enter
                hit_label[i] = lab
                hit_row[i] = row
                hit_col[i] = col
                break
            tx = _boundary_t(col, sx, x, dx, cell)
            ty = _boundary_t(row, sy, y, dy, cell)
            if tx <= ty:
                col += sx
                t_enter = tx
            else:
                row += sy
                t_enter = ty
    return ranges, hit_label, hit_row, hit_col


@njit(cache=True)
def update_log_odds(log_odds, x, y, dirs_x, dirs_y, ranges, max_range, cell, l_free, l_occ, lo, hi):
    """In-place inverse sensor model; ``inf`` range means no return."""
    nrows, ncols = log_odds.shape
    for i in range(dirs_x.shape[0]):
        dx = dirs_x[i]
        dy = dirs_y[i]
        r = ranges[i]
        hit = r < INF
        sx = 1 if dx > 0 else (-1 if dx < 0 else 0)
        sy = 1 if dy > 0 else (-1 if dy < 0 else 0)
        col = int(math.floor(x / cell))
        row = int(math.floor(y / cell))
        t_enter = 0.0
        while True:
            if row < 0 or row >= nrows or col < 0 or col >= ncols:
                break
            if not hit and t_enter >= max_range:
                break
            tx = _boundary_t(col, sx, x, dx, cell)
            ty = _boundary_t(row, sy, y, dy, cell)
            t_exit = tx if tx <= ty else ty
            # sensed ranges are cell entry distances, so a zero-length corner crossing still counts as the hit
            if hit and (t_exit > r or t_enter >= r):
                v = log_odds[row, col] + l_occ
                log_odds[row, col] = min(hi, max(lo, v))
                break
            v = log_odds[row, col] + l_free
            log_odds[row, col] = min(hi, max(lo, v))
            if tx <= ty:
                col += sx
            else:
                row += sy
            t_enter = t_exit


@njit(cache=True)
def point_collides(blocked, clear, x, y, radius, cell):
    nrows, ncols = blocked.shape
    col = int(math.floor(x / cell))
    row = int(math.floor(y / cell))
    if row < 0 or row >= nrows or col < 0 or col >= ncols:
        return True
    if clear[row, col]:
        return False
    r2 = radius * radius
    reach = int(math.ceil(radius / cell))
    for rr in range(row - reach, row + reach + 1):
        for cc in range(col - reach, col + reach + 1):
            outside = rr < 0 or rr >= nrows or cc < 0 or cc >= ncols
            if not outside and not blocked[rr, cc]:
                continue
            qx = min(max(x, cc * cell), (cc + 1) * cell)
            qy = min(max(y, rr * cell), (rr + 1) * cell)
            if (x - qx) ** 2 + (y - qy) ** 2 < r2:
                return True
    return False


@njit(cache=True)
def segment_free(blocked, clear, x, y, dx, dy, radius, cell, resolution):
    """Samples the motion every ``resolution`` metres, endpoint included."""
    length = math.sqrt(dx * dx + dy * dy)
    n = max(1, int(math.ceil(length / resolution - 1e-12)))
    for k in range(1, n + 1):
        f = k / n
        if point_collides(blocked, clear, x + dx * f, y + dy * f, radius, cell):
            return False
    return True


@njit(cache=True)
def lattice_astar(blocked, clear, x0, y0, h0, gx, gy, tol, disp, fwd_cost, turn_delta, turn_cost,
                  h_scale, radius, cell, quantum, resolution, use_heuristic):
    """Search over (round(x/q), round(y/q), heading) keys with integer costs.

    ``disp[h, j]`` is the lattice displacement of forward primitive ``j`` at
    heading index ``h``. Returns goal state (-1 if none), parent arrays, the
    cost array and the number of expansions.
    """
    nrows, ncols = blocked.shape
    nx = int(round(ncols * cell / quantum)) + 1
    ny = int(round(nrows * cell / quantum)) + 1
    nh = disp.shape[0]
    nstates = nx * ny * nh
    big = np.iinfo(np.int64).max
    g = np.full(nstates, big, np.int64)
    parent = np.full(nstates, -1, np.int64)
    parent_act = np.full(nstates, -1, np.int64)
    edge_memo = np.zeros(nx * ny * nh * disp.shape[1], np.int8)
    ix0 = int(round(x0 / quantum))
    iy0 = int(round(y0 / quantum))
    s0 = (ix0 * ny + iy0) * nh + h0
    g[s0] = 0
    heap = [(0.0, s0, 0)]
    expanded = 0
    while len(heap) > 0:
        f, s, gs = heapq.heappop(heap)
        if gs != g[s]:
            continue
        h = s % nh
        pos = s // nh
        iy = pos % ny
        ix = pos // ny
        px = x0 + (ix - ix0) * quantum
        py = y0 + (iy - iy0) * quantum
        if math.sqrt((px - gx) ** 2 + (py - gy) ** 2) <= tol:
            return s, parent, parent_act, g, expanded
        expanded += 1
        # forward primitives: action ids 1, 2
        for j in range(disp.shape[1]):
            nix = ix + disp[h, j, 0]
            niy = iy + disp[h, j, 1]
            if nix < 0 or nix >= nx or niy < 0 or niy >= ny:
                continue
            m = s * disp.shape[1] + j
            if edge_memo[m] == 0:
                ok = segment_free(blocked, clear, px, py, disp[h, j, 0] * quantum, disp[h, j, 1] * quantum,
                                  radius, cell, resolution)
                edge_memo[m] = 1 if ok else 2
            if edge_memo[m] != 1:
                continue
            ns = (nix * ny + niy) * nh + h
            ng = gs + fwd_cost[j]
            if ng < g[ns]:
                g[ns] = ng
                parent[ns] = s
                parent_act[ns] = 1 + j
                nxp = x0 + (nix - ix0) * quantum
                nyp = y0 + (niy - iy0) * quantum
                hv = 0.0
                if use_heuristic:
                    d = math.sqrt((nxp - gx) ** 2 + (nyp - gy) ** 2) - tol
                    hv = d * h_scale if d > 0.0 else 0.0
                heapq.heappush(heap, (ng + hv, ns, ng))
        # turns: action ids 3..6
        for j in range(turn_delta.shape[0]):
            nh_idx = (h + turn_delta[j]) % nh
            ns = pos * nh + nh_idx
            ng = gs + turn_cost[j]
            if ng < g[ns]:
                g[ns] = ng
                parent[ns] = s
                parent_act[ns] = 3 + j
                heapq.heappush(heap, (f - gs + ng, ns, ng))
    return -1, parent, parent_act, g, expanded


@njit(cache=True)
def visible_sum(values, candidate, opaque, cx, cy, max_range, cell):
    """Sum ``values`` over candidate cells in range with a clear line of sight.

    A cell is visible when the grid traversal from ``(cx, cy)`` to its centre
    crosses no ``opaque`` cell before reaching it. Returns (sum, count).
    """
    nrows, ncols = values.shape
    r0 = int(math.floor(cy / cell))
    c0 = int(math.floor(cx / cell))
    reach = int(math.ceil(max_range / cell)) + 1
    total = 0.0
    count = 0
    for tr in range(max(0, r0 - reach), min(nrows, r0 + reach + 1)):
        for tc in range(max(0, c0 - reach), min(ncols, c0 + reach + 1)):
            if not candidate[tr, tc]:
                continue
            px = (tc + 0.5) * cell
            py = (tr + 0.5) * cell
            dx = px - cx
            dy = py - cy
            if dx * dx + dy * dy > max_range * max_range:
                continue
            sx = 1 if dx > 0 else (-1 if dx < 0 else 0)
            sy = 1 if dy > 0 else (-1 if dy < 0 else 0)
            row = r0
            col = c0
            clear = True
            for _ in range(abs(tr - r0) + abs(tc - c0) + 2):
                if row == tr and col == tc:
                    break
                if (row != r0 or col != c0) and opaque[row, col]:
                    clear = False
                    break
                tx = _boundary_t(col, sx, cx, dx, cell)
                ty = _boundary_t(row, sy, cy, dy, cell)
                if tx <= ty:
                    col += sx
                else:
                    row += sy
                if row < 0 or row >= nrows or col < 0 or col >= ncols:
                    clear = False
                    break
            if clear and row == tr and col == tc:
                total += values[tr, tc]
                count += 1
    return total, count


@njit(cache=True)
def arm_collides(q, lengths, obstacles):
    """Any link segment of the planar chain touching an obstacle disc (cx, cy, r)."""
    px = 0.0
    py = 0.0
    ang = 0.0
    for i in range(q.shape[0]):
        ang += q[i]
        qx = px + lengths[i] * math.cos(ang)
        qy = py + lengths[i] * math.sin(ang)
        dx = qx - px
        dy = qy - py
        l2 = dx * dx + dy * dy
        for k in range(obstacles.shape[0]):
            cx = obstacles[k, 0]
            cy = obstacles[k, 1]
            r = obstacles[k, 2]
            t = 0.0
            if l2 > 0:
                t = ((cx - px) * dx + (cy - py) * dy) / l2
                t = min(1.0, max(0.0, t))
            ex = px + t * dx - cx
            ey = py + t * dy - cy
            if ex * ex + ey * ey <= r * r:
                return True
        px = qx
        py = qy
    return False


@njit(cache=True)
def arm_motion_free(q0, q1, lengths, obstacles, resolution):
    """Interpolated configs every ``resolution`` rad (joint-vector norm), endpoint included."""
    d = q1 - q0
    n = max(1, int(math.ceil(math.sqrt(np.sum(d * d)) / resolution - 1e-12)))
    for k in range(1, n + 1):
        if arm_collides(q0 + d * (k / n), lengths, obstacles):
            return False
    return True
