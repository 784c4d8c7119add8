"""Part-aware triangle mesh with per-vertex appearance and part logits.

Every vertex carries a position, spherical-harmonic color coefficients
(degree 0 by default, one RGB triplet), a scalar opacity in [0, 1], and a
vector of part logits over parts {0..K} where part 0 is the static base.
Faces index into the vertex arrays. Part membership is soft during
optimization (softmax of logits) and hardened to argmax labels when the
mesh is segmented into per-part sub-meshes.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax, stabilized by subtracting the row max."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class MeshField:
    """Triangle mesh whose vertices carry appearance and part attributes.

    Attributes
    ----------
    positions : (V, 3) float64 vertex positions
    faces : (F, 3) int64 vertex indices
    colors : (V, B, 3) float64 spherical-harmonic RGB coefficients; B = 1
        is a plain per-vertex color
    opacities : (V,) float64 in [0, 1]
    part_logits : (V, K+1) float64; column 0 is the static base part
    """

    positions: np.ndarray
    faces: np.ndarray
    colors: np.ndarray
    opacities: np.ndarray
    part_logits: np.ndarray

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float64)
        self.faces = np.ascontiguousarray(self.faces, dtype=np.int64).reshape(-1, 3)
        self.colors = np.ascontiguousarray(self.colors, dtype=np.float64)
        if self.colors.ndim == 2:
            self.colors = self.colors[:, None, :]
        self.opacities = np.ascontiguousarray(self.opacities, dtype=np.float64).reshape(-1)
        self.part_logits = np.ascontiguousarray(self.part_logits, dtype=np.float64)
        v = self.positions.shape[0]
        if (
            self.colors.shape[0] != v
            or self.opacities.shape[0] != v
            or self.part_logits.shape[0] != v
        ):
            raise ValueError("vertex attribute arrays disagree on vertex count")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= v):
            raise ValueError("face indices out of range")
        if self.part_logits.ndim != 2 or self.part_logits.shape[1] < 1:
            raise ValueError("part_logits must be (V, K+1) with K >= 0")

    # ------------------------------------------------------------------
    # derived quantities
    # ------------------------------------------------------------------

    @property
    def num_vertices(self) -> int:
        return self.positions.shape[0]

    @property
    def num_faces(self) -> int:
        return self.faces.shape[0]

    @property
    def num_parts(self) -> int:
        """Total part count including the static base (K + 1)."""
        return self.part_logits.shape[1]

    def part_weights(self) -> np.ndarray:
        """(V, K+1) soft part membership via row softmax of the logits."""
        return softmax_rows(self.part_logits)

    def part_labels(self) -> np.ndarray:
        """(V,) hard labels; argmax breaks ties toward the lowest part index."""
        return np.argmax(self.part_logits, axis=1).astype(np.int64)

    def base_color(self) -> np.ndarray:
        """(V, 3) view-independent color (leading SH coefficient)."""
        return self.colors[:, 0, :]

    def face_part_labels(self) -> np.ndarray:
        """(F,) face labels; -1 for mixed faces whose vertices disagree."""
        lab = self.part_labels()
        fl = lab[self.faces]
        same = (fl[:, 0] == fl[:, 1]) & (fl[:, 0] == fl[:, 2])
        return np.where(same, fl[:, 0], -1)

    def part_faces(self, part: int) -> np.ndarray:
        """Face rows whose three vertices all carry the given hard label."""
        return self.faces[self.face_part_labels() == part]

    def part_submesh(self, part: int):
        """Compacted (positions, faces, vertex_index) for one part.

        Faces are the unanimous faces of the part; vertices are the part's
        labeled vertices plus any referenced by those faces. vertex_index
        maps rows of the sub-mesh back to rows of this mesh.
        """
        lab = self.part_labels()
        vmask = lab == part
        faces = self.part_faces(part)
        vmask = vmask.copy()
        vmask[faces.ravel()] = True
        vidx = np.nonzero(vmask)[0]
        remap = np.full(self.num_vertices, -1, dtype=np.int64)
        remap[vidx] = np.arange(vidx.size)
        return self.positions[vidx], remap[faces], vidx

    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        return self.positions.min(axis=0), self.positions.max(axis=0)

    def bbox_diagonal(self) -> float:
        lo, hi = self.bbox()
        return float(np.linalg.norm(hi - lo))

    def edges(self) -> np.ndarray:
        """(E, 2) unique undirected edges, each row sorted, rows sorted."""
        return unique_edges(self.faces)

    def copy(self) -> "MeshField":
        return MeshField(
            positions=self.positions.copy(),
            faces=self.faces.copy(),
            colors=self.colors.copy(),
            opacities=self.opacities.copy(),
            part_logits=self.part_logits.copy(),
        )

    def subset(self, keep: np.ndarray) -> "MeshField":
        """New mesh restricted to the vertices where ``keep`` is true.

        Faces survive only when all three corners survive; indices are
        remapped to the compacted vertex order. Attribute arrays are copied.
        """
        keep = np.asarray(keep, dtype=bool)
        if keep.shape != (self.num_vertices,):
            raise ValueError("keep mask must have one entry per vertex")
        remap = np.full(self.num_vertices, -1, dtype=np.int64)
        remap[keep] = np.arange(int(keep.sum()))
        fkeep = keep[self.faces].all(axis=1) if self.faces.size else np.zeros(0, dtype=bool)
        return MeshField(
            positions=self.positions[keep].copy(),
            faces=remap[self.faces[fkeep]],
            colors=self.colors[keep].copy(),
            opacities=self.opacities[keep].copy(),
            part_logits=self.part_logits[keep].copy(),
        )

    def content_hash(self) -> str:
        """SHA-256 over the exact bytes of all arrays; detects any change."""
        h = hashlib.sha256()
        for arr in (self.positions, self.faces, self.colors, self.opacities, self.part_logits):
            h.update(np.ascontiguousarray(arr).tobytes())
            h.update(str(arr.shape).encode())
        return h.hexdigest()

    def connectivity_hash(self) -> str:
        """SHA-256 over positions and sorted face set only.

        Invariant under face permutation and within-face rotation, so two
        meshes with the same triangles hash equal regardless of ordering.
        """
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.positions).tobytes())
        faces = np.sort(self.faces, axis=1)
        order = np.lexsort((faces[:, 2], faces[:, 1], faces[:, 0]))
        h.update(np.ascontiguousarray(faces[order]).tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# mesh utilities
# ---------------------------------------------------------------------------

def unique_edges(faces: np.ndarray) -> np.ndarray:
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if faces.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e = np.sort(e, axis=1)
    return np.unique(e, axis=0)


def face_normals(positions: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """(F, 3) unit normals; degenerate faces get a zero normal."""
    tri = positions[faces]
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    ln = np.linalg.norm(n, axis=1, keepdims=True)
    return np.where(ln > 1e-300, n / np.maximum(ln, 1e-300), 0.0)


def face_areas(positions: np.ndarray, faces: np.ndarray) -> np.ndarray:
    tri = positions[faces]
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    return 0.5 * np.linalg.norm(n, axis=1)


def face_centroids(positions: np.ndarray, faces: np.ndarray) -> np.ndarray:
    return positions[faces].mean(axis=1)


def edge_connected_components(num_vertices: int, edges: np.ndarray) -> np.ndarray:
    """Component label per vertex under the given undirected edges.

    Uses union-find; isolated vertices get their own component.
    """
    parent = np.arange(num_vertices, dtype=np.int64)

    def find(i):
        root = i
        while parent[root] != root:
            root = parent[root]
        while parent[i] != root:
            parent[i], i = root, parent[i]
        return root

    for a, b in np.asarray(edges, dtype=np.int64).reshape(-1, 2):
        ra, rb = find(a), find(b)
        if ra != rb:
            if ra < rb:
                parent[rb] = ra
            else:
                parent[ra] = rb
    labels = np.array([find(i) for i in range(num_vertices)], dtype=np.int64)
    # compact labels to 0..C-1 in first-seen order
    _, inv = np.unique(labels, return_inverse=True)
    return inv


def count_connected_components(num_vertices: int, edges: np.ndarray) -> int:
    if num_vertices == 0:
        return 0
    return int(edge_connected_components(num_vertices, edges).max()) + 1


def median_edge_length(positions: np.ndarray, faces: np.ndarray) -> float:
    e = unique_edges(faces)
    if e.shape[0] == 0:
        return 0.0
    d = np.linalg.norm(positions[e[:, 0]] - positions[e[:, 1]], axis=1)
    return float(np.median(d))
