"""Per-part restricted Delaunay remeshing.

Connectivity is rebuilt independently inside every hardened part, so no
output face can span two parts. Within one part the surface is extracted
from the 3D Delaunay tetrahedralization of the part's vertices:

1. candidate triangles are the faces of all Delaunay tetrahedra;
2. a candidate survives only if its circumscribing ball is empty of the
   part's other vertices (the Gabriel property, which keeps exactly one
   triangulation of locally cocircular patches) and its circumradius is
   at most ``radius_multiplier`` times the median nearest-neighbor
   spacing of the part's vertices;
3. candidates orient to agree with the nearest input face's normal;
   exactly perpendicular (or degenerate) candidates are dropped;
4. non-manifold edge fans are pruned down to the two faces nearest the
   input surface;
5. dropped candidates are re-inserted, nearest-to-surface first, until
   every vertex pair that was edge-connected in the input is again
   edge-connected in the output.

Remeshing changes only the face list: vertex positions and attributes
pass through bitwise untouched. Because every geometric criterion above
depends only on the part's vertex set, remeshing its own output
reproduces the same face set (idempotence up to face order); the
nearest-input-face tie-breaks can only reorder pruning among faces the
criteria already agree on.

Parts with fewer than ``min_vertices`` vertices keep their input faces
verbatim (too few samples for a stable Delaunay surface), and parts with
fewer than 3 vertices come back with no faces at all.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial import Delaunay, QhullError, cKDTree

from .bvh import TriangleBVH
from .meshfield import (
    MeshField,
    edge_connected_components,
    face_normals,
    unique_edges,
)


@dataclass
class RemeshConfig:
    radius_multiplier: float = 2.0
    max_faces_per_part: int | None = None
    enforce_manifold: bool = True
    min_vertices: int = 30
    jitter_scale: float = 1e-9
    jitter_seed: int = 1851

    def __post_init__(self):
        if self.radius_multiplier <= 0:
            raise ValueError("radius multiplier must be positive")


def _circumspheres(tri: np.ndarray):
    """Circumcenter and circumradius of each (M, 3, 3) triangle.

    Degenerate triangles get an infinite radius so every radius filter
    rejects them.
    """
    a = tri[:, 0] - tri[:, 2]
    b = tri[:, 1] - tri[:, 2]
    cross = np.cross(a, b)
    denom = 2.0 * np.einsum("ij,ij->i", cross, cross)
    good = denom > 1e-300
    safe = np.where(good, denom, 1.0)
    an = np.einsum("ij,ij->i", a, a)
    bn = np.einsum("ij,ij->i", b, b)
    offset = np.cross(an[:, None] * b - bn[:, None] * a, cross) / safe[:, None]
    center = tri[:, 2] + offset
    radius = np.where(good, np.linalg.norm(offset, axis=1), np.inf)
    return center, radius


def _median_spacing(points: np.ndarray) -> float:
    tree = cKDTree(points)
    d, _ = tree.query(points, k=2)
    return float(np.median(d[:, 1]))


def _prune_nonmanifold(faces: np.ndarray, priority: np.ndarray) -> np.ndarray:
    """Boolean keep-mask leaving at most two faces on every edge.

    Faces with lower priority values win; ties fall to the lower face
    index. Iterates because removing a face can clear several edges.
    """
    keep = np.ones(faces.shape[0], dtype=bool)
    while True:
        incident = {}
        for fi in np.nonzero(keep)[0]:
            f = faces[fi]
            for e in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0])):
                key = (min(e), max(e))
                incident.setdefault(key, []).append(fi)
        removed = False
        for key, members in incident.items():
            if len(members) <= 2:
                continue
            members.sort(key=lambda fi: (priority[fi], fi))
            for fi in members[2:]:
                if keep[fi]:
                    keep[fi] = False
                    removed = True
        if not removed:
            return keep


def _connectivity_repair(
    num_vertices: int,
    input_edges: np.ndarray,
    kept_faces: np.ndarray,
    dropped_faces: np.ndarray,
    dropped_priority: np.ndarray,
) -> np.ndarray:
    """Rows of dropped_faces to re-insert so input connectivity survives.

    Every pair of vertices joined in the input edge graph must be joined
    in the output; candidates are added nearest-to-surface first until
    that holds (or no candidate can help).
    """
    take = []
    if dropped_faces.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.lexsort((np.arange(dropped_faces.shape[0]), dropped_priority))
    while True:
        faces = kept_faces
        if take:
            faces = np.concatenate([kept_faces, dropped_faces[take]], axis=0)
        out_comp = edge_connected_components(num_vertices, unique_edges(faces))
        in_comp = edge_connected_components(num_vertices, input_edges)
        # the input partition must refine the output partition
        broken = False
        for c in np.unique(in_comp):
            members = np.nonzero(in_comp == c)[0]
            if np.unique(out_comp[members]).size > 1:
                broken = True
                break
        if not broken:
            return np.array(take, dtype=np.int64)
        added = False
        for row in order:
            if row in take:
                continue
            f = dropped_faces[row]
            if np.unique(out_comp[f]).size > 1:
                take.append(int(row))
                added = True
                break
        if not added:
            warnings.warn("connectivity repair ran out of candidates")
            return np.array(take, dtype=np.int64)


def restricted_delaunay_part(
    positions: np.ndarray,
    vertex_idx: np.ndarray,
    seed_faces: np.ndarray,
    cfg: RemeshConfig,
) -> np.ndarray:
    """Rebuild one part's face set; returns (F*, 3) global vertex indices.

    Parameters
    ----------
    positions : (V, 3) full vertex array (only rows in vertex_idx used)
    vertex_idx : (Nk,) global indices of the part's vertices
    seed_faces : (Fk, 3) the part's current faces, global indices
    """
    positions = np.asarray(positions, dtype=np.float64)
    vertex_idx = np.asarray(vertex_idx, dtype=np.int64)
    seed_faces = np.asarray(seed_faces, dtype=np.int64).reshape(-1, 3)
    nk = vertex_idx.size

    if nk < 3:
        warnings.warn(f"part with {nk} vertices cannot carry faces")
        return np.zeros((0, 3), dtype=np.int64)
    if nk < cfg.min_vertices:
        return seed_faces.copy()
    if seed_faces.shape[0] == 0:
        warnings.warn("part has vertices but no faces to orient against")
        return np.zeros((0, 3), dtype=np.int64)

    pts = positions[vertex_idx]
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    diag = float(np.linalg.norm(hi - lo))
    rng = np.random.default_rng(cfg.jitter_seed)
    jitter = rng.normal(scale=cfg.jitter_scale * max(diag, 1e-30), size=pts.shape)

    jittered = pts + jitter
    try:
        tet = Delaunay(jittered)
    except QhullError:
        warnings.warn("Delaunay failed; part keeps its input faces")
        return seed_faces.copy()

    simp = tet.simplices
    cand = np.concatenate(
        [simp[:, [0, 1, 2]], simp[:, [0, 1, 3]], simp[:, [0, 2, 3]], simp[:, [1, 2, 3]]]
    )
    cand = np.unique(np.sort(cand, axis=1), axis=0)

    # circumspheres and the emptiness test both use the jittered points:
    # exactly cocircular patches (flat grids) would otherwise tie, keeping
    # both diagonals of every quad and double-covering the surface
    tri_pts = jittered[cand]
    centers, radii = _circumspheres(tri_pts)

    # empty circumscribing ball (Gabriel) test against the part's points;
    # the query ball is shrunk by far less than the jitter-induced margins,
    # so the seeded jitter decides cocircular ties instead of the epsilon
    tree = cKDTree(jittered)
    finite = np.isfinite(radii)
    empty = np.zeros(cand.shape[0], dtype=bool)
    fin_rows = np.nonzero(finite)[0]
    hits = tree.query_ball_point(centers[fin_rows], radii[fin_rows] * (1.0 - 1e-12))
    for row, inside in zip(fin_rows, hits):
        own = set(cand[row])
        empty[row] = all(h in own for h in inside)

    spacing = _median_spacing(pts)
    keep = empty & (radii <= cfg.radius_multiplier * spacing)
    cand = cand[keep]
    if cand.shape[0] == 0:
        warnings.warn("no candidate faces survived filtering; keeping input faces")
        return seed_faces.copy()

    # orientation and agreement with the nearest input face
    seed_bvh = TriangleBVH(positions, seed_faces)
    cand_global = vertex_idx[cand]
    centroids = positions[cand_global].mean(axis=1)
    nearest_face, _, _, seed_dist = seed_bvh.query(centroids)
    seed_norm = face_normals(positions, seed_faces)[nearest_face]
    cand_norm = face_normals(positions, cand_global)
    dots = np.einsum("ij,ij->i", cand_norm, seed_norm)
    flip = dots < 0.0
    cand_global[flip] = cand_global[flip][:, [0, 2, 1]]
    aligned = dots != 0.0
    dropped_pool = [cand_global[~aligned]]
    dropped_prio = [seed_dist[~aligned]]
    cand_global = cand_global[aligned]
    seed_dist = seed_dist[aligned]

    if cfg.max_faces_per_part is not None and cand_global.shape[0] > cfg.max_faces_per_part:
        order = np.lexsort((np.arange(cand_global.shape[0]), seed_dist))
        cut = order[: cfg.max_faces_per_part]
        rest = order[cfg.max_faces_per_part :]
        dropped_pool.append(cand_global[rest])
        dropped_prio.append(seed_dist[rest])
        cand_global = cand_global[cut]
        seed_dist = seed_dist[cut]

    if cfg.enforce_manifold and cand_global.shape[0]:
        keep = _prune_nonmanifold(cand_global, seed_dist)
        dropped_pool.append(cand_global[~keep])
        dropped_prio.append(seed_dist[~keep])
        cand_global = cand_global[keep]
        seed_dist = seed_dist[keep]

    dropped_faces = np.concatenate(dropped_pool, axis=0)
    dropped_priority = np.concatenate(dropped_prio, axis=0)

    # restore the input's edge connectivity; indices are local for the
    # component analysis, global in the face rows
    remap = np.full(positions.shape[0], -1, dtype=np.int64)
    remap[vertex_idx] = np.arange(nk)
    take = _connectivity_repair(
        nk,
        remap[unique_edges(seed_faces)],
        remap[cand_global],
        remap[dropped_faces],
        dropped_priority,
    )
    if take.size:
        cand_global = np.concatenate([cand_global, dropped_faces[take]], axis=0)
    return cand_global


def remesh_all(mesh: MeshField, cfg: RemeshConfig | None = None) -> MeshField:
    """Remesh every part and union the results into a new mesh.

    The vertex arrays are shared with the input (attributes are untouched
    by construction); only the face list is new.
    """
    cfg = cfg or RemeshConfig()
    labels = mesh.part_labels()
    pieces = []
    for part in range(mesh.num_parts):
        vidx = np.nonzero(labels == part)[0]
        if vidx.size == 0:
            continue
        seed = mesh.part_faces(part)
        pieces.append(restricted_delaunay_part(mesh.positions, vidx, seed, cfg))
    faces = (
        np.concatenate([p for p in pieces if p.size], axis=0)
        if any(p.size for p in pieces)
        else np.zeros((0, 3), dtype=np.int64)
    )
    return MeshField(
        positions=mesh.positions,
        faces=faces,
        colors=mesh.colors,
        opacities=mesh.opacities,
        part_logits=mesh.part_logits,
    )
