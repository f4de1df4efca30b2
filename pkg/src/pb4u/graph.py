"""Per-timestep simulation graph: garment mesh edges plus proximity world
edges, with translation-invariant vertex and edge feature matrices.

Graph vertex indexing is garment-first: garment vertices occupy rows
[0, n_g), body vertices [n_g, n_g + n_b). A directed edge (src, dst) carries
information into dst; world edges point body -> garment only, because the
body is kinematic and never updated.

Feature schema (fixed widths, independent of resolution):
  vertex (14): velocity (3), lumped mass (1), unit normal (3),
               material parameters under log1p (5), one-hot type garment/body (2)
  edge (7):    current relative vector (3), rest relative vector (3),
               current/rest length ratio (1)
No absolute positions or absolute lengths appear anywhere.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument, InvalidMesh
from .mesh import TriMesh, lumped_vertex_areas, vertex_normals

VERTEX_FEATURE_DIM = 14
EDGE_FEATURE_DIM = 7


@dataclass
class SimState:
    """Time-t positions and velocities plus one step of history."""

    garment_pos: np.ndarray       # (n_g, 3)
    garment_vel: np.ndarray       # (n_g, 3)
    garment_pos_prev: np.ndarray  # (n_g, 3)
    body_pos: np.ndarray          # (n_b, 3)
    body_pos_prev: np.ndarray     # (n_b, 3)
    time_step: float

    def __post_init__(self):
        if self.time_step <= 0:
            raise InvalidArgument(f"time step must be positive, got {self.time_step}")
        n_g = self.garment_pos.shape[0]
        n_b = self.body_pos.shape[0]
        for name, arr, rows in (
            ("garment_pos", self.garment_pos, n_g),
            ("garment_vel", self.garment_vel, n_g),
            ("garment_pos_prev", self.garment_pos_prev, n_g),
            ("body_pos", self.body_pos, n_b),
            ("body_pos_prev", self.body_pos_prev, n_b),
        ):
            if arr.shape != (rows, 3):
                raise InvalidArgument(f"{name} must have shape ({rows}, 3), got {arr.shape}")


@dataclass
class SimGraph:
    mesh_edges: np.ndarray      # (Em, 2) directed (src, dst), graph indices
    world_edges: np.ndarray     # (Ew, 2) directed (src=body graph idx, dst=garment idx)
    vertex_features: np.ndarray
    edge_features: np.ndarray
    garment_count: int
    body_count: int

    @property
    def senders(self) -> np.ndarray:
        return np.concatenate([self.mesh_edges[:, 0], self.world_edges[:, 0]])

    @property
    def receivers(self) -> np.ndarray:
        return np.concatenate([self.mesh_edges[:, 1], self.world_edges[:, 1]])


# classic spatial-hash primes; int64 products wrap, and key collisions only
# add candidate pairs that the exact distance test then rejects
_HASH_PRIMES = (np.int64(73856093), np.int64(19349663), np.int64(83492791))
_CELL_CLAMP = float(2**50)


def _hash_cells(points: np.ndarray, radius: float) -> np.ndarray:
    scaled = np.clip(points / radius, -_CELL_CLAMP, _CELL_CLAMP)
    return np.floor(scaled).astype(np.int64)


def _pack_cells(cells: np.ndarray) -> np.ndarray:
    return (
        (cells[:, 0] * _HASH_PRIMES[0])
        ^ (cells[:, 1] * _HASH_PRIMES[1])
        ^ (cells[:, 2] * _HASH_PRIMES[2])
    )


def build_world_edges(garment_pos: np.ndarray, body_pos: np.ndarray, radius: float) -> np.ndarray:
    """All (garment, body) pairs with Euclidean distance strictly below
    radius, sorted by (garment index, body index).

    Uses a uniform spatial hash with cell size equal to the radius, so only
    the 27 neighbouring cells of each garment vertex are tested.
    """
    if radius <= 0:
        raise InvalidArgument(f"radius must be positive, got {radius}")
    garment_pos = np.asarray(garment_pos, dtype=np.float64)
    body_pos = np.asarray(body_pos, dtype=np.float64)
    if garment_pos.shape[0] == 0 or body_pos.shape[0] == 0:
        return np.zeros((0, 2), dtype=np.int64)

    body_cells = _hash_cells(body_pos, radius)
    garment_cells = _hash_cells(garment_pos, radius)
    body_keys = _pack_cells(body_cells)
    body_order = np.argsort(body_keys, kind="stable")
    sorted_keys = body_keys[body_order]

    pairs_g: list[np.ndarray] = []
    pairs_b: list[np.ndarray] = []
    garment_idx = np.arange(garment_pos.shape[0], dtype=np.int64)
    for dx in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dz in (-1, 0, 1):
                neighbour = garment_cells + np.array([dx, dy, dz], dtype=np.int64)
                keys = _pack_cells(neighbour)
                left = np.searchsorted(sorted_keys, keys, side="left")
                right = np.searchsorted(sorted_keys, keys, side="right")
                counts = right - left
                total = int(counts.sum())
                if total == 0:
                    continue
                g_rep = np.repeat(garment_idx, counts)
                starts = np.repeat(left, counts)
                offsets = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
                b_cand = body_order[starts + offsets]
                delta = garment_pos[g_rep] - body_pos[b_cand]
                close = (delta * delta).sum(axis=1) < radius * radius
                pairs_g.append(g_rep[close])
                pairs_b.append(b_cand[close])

    if not pairs_g:
        return np.zeros((0, 2), dtype=np.int64)
    g = np.concatenate(pairs_g)
    b = np.concatenate(pairs_b)
    # hash-key collisions between neighbouring cells can surface the same
    # pair through two offsets; the exact combined key dedupes and orders
    n_b = body_pos.shape[0]
    combined = np.unique(g * n_b + b)
    return np.stack([combined // n_b, combined % n_b], axis=1)


def vertex_features(
    state: SimState,
    garment_mesh: TriMesh,
    body_mesh: TriMesh | None,
    dtype=np.float64,
) -> np.ndarray:
    """Feature rows for garment then body vertices. Body velocity is the
    backward difference of its scripted motion; body mass is zero (kinematic).
    """
    n_g = garment_mesh.vertex_count
    if state.garment_pos.shape[0] != n_g:
        raise InvalidArgument(
            f"state has {state.garment_pos.shape[0]} garment vertices, mesh has {n_g}"
        )
    n_b = state.body_pos.shape[0]
    if body_mesh is None:
        if n_b != 0:
            raise InvalidArgument("body positions given without a body mesh")
    elif body_mesh.vertex_count != n_b:
        raise InvalidArgument(
            f"state has {n_b} body vertices, mesh has {body_mesh.vertex_count}"
        )

    # log1p keeps stiffness-scale parameters (Pa) at O(10) in the features;
    # MaterialParams guarantees nonnegative inputs
    material = np.log1p(garment_mesh.material.as_feature())
    out = np.zeros((n_g + n_b, VERTEX_FEATURE_DIM), dtype=np.float64)

    out[:n_g, 0:3] = state.garment_vel
    out[:n_g, 3] = garment_mesh.material.mass_density * lumped_vertex_areas(garment_mesh)
    out[:n_g, 4:7] = vertex_normals(state.garment_pos, garment_mesh)
    out[:n_g, 7:12] = material
    out[:n_g, 12] = 1.0

    if n_b:
        out[n_g:, 0:3] = (state.body_pos - state.body_pos_prev) / state.time_step
        out[n_g:, 4:7] = vertex_normals(state.body_pos, body_mesh)
        out[n_g:, 7:12] = material
        out[n_g:, 13] = 1.0
    return out.astype(dtype, copy=False)


def edge_features(
    current_pos: np.ndarray,
    rest_pos: np.ndarray,
    edges: np.ndarray,
    dtype=np.float64,
) -> np.ndarray:
    """Relative-only features for directed edges within one point set."""
    cur = current_pos[edges[:, 1]] - current_pos[edges[:, 0]]
    rest = rest_pos[edges[:, 1]] - rest_pos[edges[:, 0]]
    rest_len = np.linalg.norm(rest, axis=1)
    if np.any(rest_len <= 0):
        raise InvalidMesh("edge with zero rest length")
    out = np.empty((edges.shape[0], EDGE_FEATURE_DIM), dtype=np.float64)
    out[:, 0:3] = cur
    out[:, 3:6] = rest
    out[:, 6] = np.linalg.norm(cur, axis=1) / rest_len
    return out.astype(dtype, copy=False)


def world_edge_features(
    garment_pos: np.ndarray,
    body_pos: np.ndarray,
    pairs: np.ndarray,
    radius: float,
    dtype=np.float64,
) -> np.ndarray:
    """World edges have no rest state; the rest slot is the current vector
    rescaled to the search radius, so the ratio feature is |current|/radius
    and stays in [0, 1)."""
    cur = garment_pos[pairs[:, 0]] - body_pos[pairs[:, 1]]
    length = np.linalg.norm(cur, axis=1)
    direction = np.where(length[:, None] > 1e-300, cur / np.maximum(length, 1e-300)[:, None], (0.0, 1.0, 0.0))
    out = np.empty((pairs.shape[0], EDGE_FEATURE_DIM), dtype=np.float64)
    out[:, 0:3] = cur
    out[:, 3:6] = direction * radius
    out[:, 6] = length / radius
    return out.astype(dtype, copy=False)


def build_graph(
    state: SimState,
    garment_mesh: TriMesh,
    body_mesh: TriMesh | None,
    world_radius: float,
    dtype=np.float64,
) -> SimGraph:
    n_g = garment_mesh.vertex_count
    undirected = garment_mesh.edges
    mesh_edges = np.concatenate([undirected, undirected[:, ::-1]]).astype(np.int64)

    if state.body_pos.shape[0]:
        pairs = build_world_edges(state.garment_pos, state.body_pos, world_radius)
        wf = world_edge_features(state.garment_pos, state.body_pos, pairs, world_radius, dtype)
        world_edges = np.stack([pairs[:, 1] + n_g, pairs[:, 0]], axis=1)
    else:
        world_edges = np.zeros((0, 2), dtype=np.int64)
        wf = np.zeros((0, EDGE_FEATURE_DIM), dtype=dtype)

    vf = vertex_features(state, garment_mesh, body_mesh, dtype)
    mf = edge_features(state.garment_pos, garment_mesh.rest_positions, mesh_edges, dtype)
    return SimGraph(
        mesh_edges=mesh_edges,
        world_edges=world_edges,
        vertex_features=vf,
        edge_features=np.concatenate([mf, wf]),
        garment_count=n_g,
        body_count=state.body_pos.shape[0],
    )
