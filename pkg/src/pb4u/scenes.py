"""Procedural scenes: a cloth grid over an animated analytic body.

A Scene owns the garment mesh, its initial placement (optionally with pinned
vertices held fixed kinematically), a keyframed body primitive tessellated as
a triangle mesh, and the shared simulation constants. Scenes also carry the
experience buffer that training samples from.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument, InvalidState
from .graph import SimState
from .mesh import MaterialParams, TriMesh, make_grid_cloth, mean_edge_length

DEFAULT_BODY_LAT = 12
DEFAULT_BODY_LON = 18


@dataclass(frozen=True)
class BodySpec:
    kind: str                 # "sphere" is the only analytic primitive
    radius: float
    keyframes: np.ndarray     # (K, 4) rows of (t, cx, cy, cz)
    lat: int = DEFAULT_BODY_LAT
    lon: int = DEFAULT_BODY_LON

    def __post_init__(self):
        if self.kind != "sphere":
            raise InvalidArgument(f"unsupported body primitive {self.kind!r}")
        if self.radius <= 0:
            raise InvalidArgument("body radius must be positive")
        kf = np.asarray(self.keyframes, dtype=np.float64)
        if kf.ndim != 2 or kf.shape[1] != 4 or kf.shape[0] < 1:
            raise InvalidArgument("keyframes must be (K, 4) rows of (t, x, y, z)")
        if not np.all(np.isfinite(kf)):
            raise InvalidArgument("keyframes must be finite")
        if np.any(np.diff(kf[:, 0]) <= 0) and kf.shape[0] > 1:
            raise InvalidArgument("keyframe times must be strictly increasing")
        object.__setattr__(self, "keyframes", kf)

    def center_at(self, t: float) -> np.ndarray:
        """Piecewise-linear center, clamped outside the keyframe range."""
        kf = self.keyframes
        times = kf[:, 0]
        if t <= times[0]:
            return kf[0, 1:].copy()
        if t >= times[-1]:
            return kf[-1, 1:].copy()
        hi = int(np.searchsorted(times, t, side="right"))
        lo = hi - 1
        span = times[hi] - times[lo]
        w = (t - times[lo]) / span
        return (1.0 - w) * kf[lo, 1:] + w * kf[hi, 1:]


def uv_sphere(radius: float, lat: int, lon: int, material: MaterialParams) -> TriMesh:
    """Latitude-longitude sphere centered at the origin, poles on the y axis,
    outward winding."""
    if lat < 3 or lon < 3:
        raise InvalidArgument("sphere tessellation needs lat >= 3 and lon >= 3")
    verts = [(0.0, radius, 0.0)]
    for i in range(1, lat):
        theta = np.pi * i / lat
        y = radius * np.cos(theta)
        ring = radius * np.sin(theta)
        for j in range(lon):
            phi = 2.0 * np.pi * j / lon
            verts.append((ring * np.cos(phi), y, ring * np.sin(phi)))
    verts.append((0.0, -radius, 0.0))
    south = len(verts) - 1

    def ring_vertex(i, j):
        return 1 + (i - 1) * lon + (j % lon)

    tris = []
    for j in range(lon):
        tris.append((0, ring_vertex(1, j + 1), ring_vertex(1, j)))
    for i in range(1, lat - 1):
        for j in range(lon):
            a, b = ring_vertex(i, j), ring_vertex(i, j + 1)
            c, d = ring_vertex(i + 1, j), ring_vertex(i + 1, j + 1)
            tris.append((a, d, c))
            tris.append((a, b, d))
    for j in range(lon):
        tris.append((south, ring_vertex(lat - 1, j), ring_vertex(lat - 1, j + 1)))
    return TriMesh.from_triangles(np.array(verts), np.array(tris, dtype=np.int64), material)


@dataclass
class BufferedFrame:
    """One sampled pre-step state plus the frame index it came from, so the
    body trajectory can supply the following keyframe."""

    frame: int
    state: SimState


@dataclass
class Scene:
    garment: TriMesh
    initial_positions: np.ndarray
    pinned: np.ndarray            # garment vertex indices held fixed
    body: BodySpec
    body_mesh: TriMesh            # template centered at the origin
    dt: float
    gravity: float
    world_radius: float
    frames: int
    contact_margin: float
    buffer: list = field(default_factory=list)

    def __post_init__(self):
        if self.initial_positions.shape != (self.garment.vertex_count, 3):
            raise InvalidArgument("initial positions do not match the garment mesh")
        if self.frames < 1:
            raise InvalidArgument("scene needs at least one frame")
        if self.pinned.size and (self.pinned.min() < 0 or self.pinned.max() >= self.garment.vertex_count):
            raise InvalidArgument("pinned index out of range")

    def body_positions(self, frame: int) -> np.ndarray:
        return self.body_mesh.rest_positions + self.body.center_at(frame * self.dt)

    def initial_state(self) -> SimState:
        body0 = self.body_positions(0)
        return SimState(
            garment_pos=self.initial_positions.copy(),
            garment_vel=np.zeros_like(self.initial_positions),
            garment_pos_prev=self.initial_positions.copy(),
            body_pos=body0,
            body_pos_prev=body0.copy(),
            time_step=self.dt,
        )

    def pinned_targets(self) -> np.ndarray:
        return self.initial_positions[self.pinned]

    def max_penetration(self, garment_pos: np.ndarray, frame: int) -> float:
        """Deepest garment penetration into the analytic body at a frame;
        zero when every vertex is outside."""
        center = self.body.center_at(frame * self.dt)
        gaps = np.linalg.norm(garment_pos - center, axis=1) - self.body.radius
        return float(max(0.0, -gaps.min()))


def sample_frame(scene: Scene, rng: np.random.Generator) -> BufferedFrame:
    """Uniform draw from the scene's populated rollout buffer."""
    if not scene.buffer:
        raise InvalidState("scene buffer is empty; roll the scene out first")
    return scene.buffer[int(rng.integers(len(scene.buffer)))]


def _grid_placement(positions: np.ndarray, plane: str, origin) -> np.ndarray:
    out = positions.copy()
    if plane == "xy":
        # rotate the x-z rest plane up by 90 degrees about x: (x, 0, z) -> (x, -z, 0)
        out = out[:, [0, 2, 1]]
        out[:, 1] = -out[:, 1]
    elif plane != "xz":
        raise InvalidArgument(f"unknown garment plane {plane!r}")
    return out + np.asarray(origin, dtype=np.float64)


def build_scene(
    garment: TriMesh,
    *,
    plane: str = "xz",
    origin=(0.0, 0.0, 0.0),
    pinned=(),
    body: BodySpec,
    material: MaterialParams,
    dt: float,
    gravity: float,
    world_radius: float,
    frames: int,
    contact_margin: float,
) -> Scene:
    initial = _grid_placement(garment.rest_positions, plane, origin)
    return Scene(
        garment=garment,
        initial_positions=initial,
        pinned=np.asarray(sorted(set(int(i) for i in pinned)), dtype=np.int64),
        body=body,
        body_mesh=uv_sphere(body.radius, body.lat, body.lon, material),
        dt=dt,
        gravity=gravity,
        world_radius=world_radius,
        frames=frames,
        contact_margin=contact_margin,
    )


def drape_sphere_preset(grid_n: int, side: float = 1.0, frames: int = 48, dt: float = 0.02) -> dict:
    """Cloth grid falling onto a gently swaying sphere."""
    if grid_n < 2:
        raise InvalidArgument(f"grid needs n >= 2, got {grid_n}")
    probe = make_grid_cloth(grid_n, side, _preset_material_params())
    radius = 1.5 * mean_edge_length(probe)
    duration = frames * dt
    return {
        "format": "pb4u-scene",
        "version": 1,
        "garment": {"kind": "grid", "n": grid_n, "side": side, "plane": "xz",
                    "origin": [0.0, 0.0, 0.0], "pinned": []},
        "body": {"type": "sphere", "radius": 0.25,
                 "keyframes": [[0.0, 0.0, -0.3, 0.0],
                               [duration / 2.0, 0.06, -0.3, 0.0],
                               [duration, -0.06, -0.3, 0.0]],
                 "lat": DEFAULT_BODY_LAT, "lon": DEFAULT_BODY_LON},
        "material": _preset_material(),
        "dt": dt,
        "gravity": 9.81,
        "world_edge_radius": radius,
        "frames": frames,
        "contact_margin": 0.002,
    }


def hang_pinned_preset(grid_n: int, side: float = 1.0, frames: int = 48, dt: float = 0.02) -> dict:
    """Vertical cloth pinned along its top row; a sphere swings through it."""
    if grid_n < 2:
        raise InvalidArgument(f"grid needs n >= 2, got {grid_n}")
    probe = make_grid_cloth(grid_n, side, _preset_material_params())
    radius = 1.5 * mean_edge_length(probe)
    duration = frames * dt
    pinned = [i * grid_n for i in range(grid_n)]  # j = 0 column becomes the top row
    return {
        "format": "pb4u-scene",
        "version": 1,
        "garment": {"kind": "grid", "n": grid_n, "side": side, "plane": "xy",
                    "origin": [0.0, 0.05 + side / 2.0, 0.0], "pinned": pinned},
        "body": {"type": "sphere", "radius": 0.18,
                 "keyframes": [[0.0, 0.0, 0.05 + side / 2.0, 0.45],
                               [duration / 2.0, 0.0, 0.05 + side / 2.0, 0.14],
                               [duration, 0.0, 0.05 + side / 2.0, 0.45]],
                 "lat": DEFAULT_BODY_LAT, "lon": DEFAULT_BODY_LON},
        "material": _preset_material(),
        "dt": dt,
        "gravity": 9.81,
        "world_edge_radius": radius,
        "frames": frames,
        "contact_margin": 0.002,
    }


def _preset_material() -> dict:
    return {
        "lame_mu": 2000.0,
        "lame_lambda": 2000.0,
        "bending_coeff": 1e-5,
        "mass_density": 0.3,
        "friction_coeff": 0.5,
    }


def _preset_material_params() -> MaterialParams:
    return MaterialParams(**_preset_material())


PRESETS = {
    "drape-sphere": drape_sphere_preset,
    "hang-pinned": hang_pinned_preset,
}
