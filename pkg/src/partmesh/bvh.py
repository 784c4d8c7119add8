"""Bounding volume hierarchy for closest-triangle queries.

Builds a binary AABB tree over triangle faces (median split on the longest
centroid axis, at most 8 faces per leaf) and answers batched closest-point
queries with branch-and-bound pruning. Distance ties between faces resolve
to the lowest face index so queries are deterministic.
"""

from __future__ import annotations

import numpy as np

from .geometry import _closest_point_on_triangles

LEAF_SIZE = 8


class TriangleBVH:
    """Static BVH over a triangle soup.

    Parameters
    ----------
    vertices : (V, 3) float array
    faces : (F, 3) int array of vertex indices; face order defines the
        tie-break priority (lower index wins on exact distance ties)
    """

    def __init__(self, vertices: np.ndarray, faces: np.ndarray):
        self.vertices = np.asarray(vertices, dtype=np.float64)
        self.faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
        nf = self.faces.shape[0]
        self._tris = self.vertices[self.faces]  # (F, 3, 3)

        if nf == 0:
            self._node_lo = np.zeros((0, 3))
            self._node_hi = np.zeros((0, 3))
            self._node_left = np.zeros(0, dtype=np.int64)
            self._node_right = np.zeros(0, dtype=np.int64)
            self._node_start = np.zeros(0, dtype=np.int64)
            self._node_count = np.zeros(0, dtype=np.int64)
            self._order = np.zeros(0, dtype=np.int64)
            return

        centroids = self._tris.mean(axis=1)
        face_lo = self._tris.min(axis=1)
        face_hi = self._tris.max(axis=1)

        order = np.arange(nf)
        lo_list, hi_list = [], []
        left_list, right_list = [], []
        start_list, count_list = [], []

        # iterative build; each stack entry is a slice of `order`
        stack = [(0, nf, -1, False)]
        while stack:
            beg, end, parent, is_right = stack.pop()
            idx = len(lo_list)
            if parent >= 0:
                if is_right:
                    right_list[parent] = idx
                else:
                    left_list[parent] = idx
            seg = order[beg:end]
            lo = face_lo[seg].min(axis=0)
            hi = face_hi[seg].max(axis=0)
            lo_list.append(lo)
            hi_list.append(hi)
            left_list.append(-1)
            right_list.append(-1)
            if end - beg <= LEAF_SIZE:
                start_list.append(beg)
                count_list.append(end - beg)
                continue
            start_list.append(-1)
            count_list.append(0)
            cen = centroids[seg]
            axis = int(np.argmax(cen.max(axis=0) - cen.min(axis=0)))
            mid = (end - beg) // 2
            part = np.argpartition(cen[:, axis], mid)
            order[beg:end] = seg[part]
            stack.append((beg + mid, end, idx, True))
            stack.append((beg, beg + mid, idx, False))

        self._node_lo = np.array(lo_list)
        self._node_hi = np.array(hi_list)
        self._node_left = np.array(left_list, dtype=np.int64)
        self._node_right = np.array(right_list, dtype=np.int64)
        self._node_start = np.array(start_list, dtype=np.int64)
        self._node_count = np.array(count_list, dtype=np.int64)
        self._order = order

    def query(self, points: np.ndarray):
        """Closest triangle for each query point.

        Parameters
        ----------
        points : (Q, 3) query positions

        Returns
        -------
        (face_idx (Q,), closest (Q, 3), bary (Q, 3), dist (Q,))
        """
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        nq = points.shape[0]
        if self.faces.shape[0] == 0:
            raise ValueError("no candidate faces: BVH is empty")

        best_d2 = np.full(nq, np.inf)
        best_face = np.full(nq, -1, dtype=np.int64)
        best_point = np.zeros((nq, 3))
        best_bary = np.zeros((nq, 3))

        # single shared DFS ordering; each step prunes the active query set
        all_q = np.arange(nq)
        stack = [(0, all_q)]
        while stack:
            node, active = stack.pop()
            if active.size == 0:
                continue
            lo = self._node_lo[node]
            hi = self._node_hi[node]
            p = points[active]
            delta = np.maximum(np.maximum(lo - p, p - hi), 0.0)
            box_d2 = np.einsum("ij,ij->i", delta, delta)
            keep = box_d2 < best_d2[active]
            active = active[keep]
            if active.size == 0:
                continue
            cnt = self._node_count[node]
            if self._node_start[node] >= 0:
                beg = self._node_start[node]
                fidx = self._order[beg : beg + cnt]
                tris = self._tris[fidx]
                p = points[active]
                na, nf = active.size, fidx.size
                pp = np.repeat(p, nf, axis=0)
                tt = np.tile(tris, (na, 1, 1))
                cpt, cb, cd2 = _closest_point_on_triangles(pp, tt)
                cd2 = cd2.reshape(na, nf)
                faces_b = np.broadcast_to(fidx, (na, nf))
                # lowest face index wins exact distance ties
                d2_min = cd2.min(axis=1, keepdims=True)
                face_or_big = np.where(cd2 == d2_min, faces_b, np.iinfo(np.int64).max)
                flat_best = np.argmin(face_or_big, axis=1)
                rows = np.arange(na)
                d2_sel = cd2[rows, flat_best]
                f_sel = faces_b[rows, flat_best]
                improve = (d2_sel < best_d2[active]) | (
                    (d2_sel == best_d2[active]) & (f_sel < best_face[active])
                )
                upd = active[improve]
                sel = flat_best[improve]
                best_d2[upd] = d2_sel[improve]
                best_face[upd] = f_sel[improve]
                flat_idx = rows[improve] * nf + sel
                best_point[upd] = cpt[flat_idx]
                best_bary[upd] = cb[flat_idx]
            else:
                stack.append((self._node_right[node], active))
                stack.append((self._node_left[node], active))

        return best_face, best_point, best_bary, np.sqrt(best_d2)


def brute_force_closest(vertices: np.ndarray, faces: np.ndarray, points: np.ndarray):
    """Reference O(Q * F) closest-triangle query, no acceleration structure."""
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if faces.shape[0] == 0:
        raise ValueError("no candidate faces: mesh is empty")
    tris = vertices[faces]
    nq, nf = points.shape[0], faces.shape[0]
    pp = np.repeat(points, nf, axis=0)
    tt = np.tile(tris, (nq, 1, 1))
    cpt, cb, cd2 = _closest_point_on_triangles(pp, tt)
    cd2 = cd2.reshape(nq, nf)
    best = np.argmin(cd2, axis=1)  # argmin takes the first (lowest) index on ties
    rows = np.arange(nq)
    flat = rows * nf + best
    return best.astype(np.int64), cpt[flat], cb[flat], np.sqrt(cd2[rows, best])
