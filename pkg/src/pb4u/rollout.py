"""Autoregressive rollout machinery shared by training, evaluation, and the
CLI: scene stepping with pin constraints, per-frame losses, divergence
handling, and OBJ/metrics output."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import network as net
from . import physics
from .control import ControlConfig, propagation_steps
from .diffcore import Tensor
from .errors import NumericDivergence
from .graph import SimState
from .mesh import ScaleFactors, mean_edge_length, rest_scale_factors, vertex_normals, write_obj
from .physics import LossBreakdown, LossWeights
from .scenes import Scene

METRIC_COLUMNS = ("stretch", "bending", "collision", "inertia", "gravity", "friction", "total")


@dataclass
class SimContext:
    """Everything fixed across the frames of one rollout: meshes, rest
    geometry, scale factors, and the propagation depth chosen for this mesh."""

    scene: Scene
    config: net.NetworkConfig
    rest: physics.RestGeometry
    scale: ScaleFactors
    k_steps: int
    mean_edge: float
    weights: LossWeights = field(default_factory=LossWeights)
    dtype: type = np.float32

    @classmethod
    def build(
        cls,
        scene: Scene,
        config: net.NetworkConfig,
        ctrl: ControlConfig,
        *,
        adaptive_k: bool = True,
        update_scaling: bool = True,
        forced_k: int | None = None,
        weights: LossWeights | None = None,
        dtype=np.float32,
    ) -> "SimContext":
        edge = mean_edge_length(scene.garment)
        if forced_k is not None:
            k = int(forced_k)
        elif adaptive_k:
            k = propagation_steps(ctrl, edge)
        else:
            k = ctrl.k_base
        scale = rest_scale_factors(scene.garment) if update_scaling else ScaleFactors(
            np.ones(scene.garment.vertex_count)
        )
        return cls(
            scene=scene,
            config=config,
            rest=physics.build_rest_geometry(scene.garment),
            scale=scale,
            k_steps=k,
            mean_edge=edge,
            weights=weights or LossWeights(),
            dtype=dtype,
        )


def _apply_pins_tensor(ctx: SimContext, pred: Tensor) -> Tensor:
    pinned = ctx.scene.pinned
    if pinned.size == 0:
        return pred
    n = pred.data.shape[0]
    mask = np.ones((n, 3), dtype=pred.dtype)
    mask[pinned] = 0.0
    targets = np.zeros((n, 3), dtype=pred.dtype)
    targets[pinned] = ctx.scene.pinned_targets()
    return (pred * Tensor(mask)) + Tensor(targets)


def _apply_pins_state(ctx: SimContext, state: SimState) -> SimState:
    pinned = ctx.scene.pinned
    if pinned.size:
        state.garment_pos[pinned] = ctx.scene.pinned_targets()
        state.garment_vel[pinned] = 0.0
    return state


def advance(
    ctx: SimContext,
    state: SimState,
    frame: int,
    params: net.ModelParams,
) -> tuple[SimState, Tensor]:
    """One model step from the state at ``frame`` to ``frame + 1``, with
    pinned vertices held at their scripted positions."""
    body_next = ctx.scene.body_positions(frame + 1)
    next_state, pred = net.step(
        state,
        ctx.scene.garment,
        ctx.scene.body_mesh,
        ctx.scale,
        params,
        ctx.config,
        ctx.k_steps,
        ctx.scene.world_radius,
        body_next,
        dtype=ctx.dtype,
    )
    pred = _apply_pins_tensor(ctx, pred)
    next_state.garment_pos = pred.data.astype(np.float64)
    _apply_pins_state(ctx, next_state)
    return next_state, pred


def frame_loss(ctx: SimContext, pred: Tensor, pre_state: SimState, next_state: SimState):
    """Composite loss of a predicted frame against its pre-step state."""
    body_mesh = ctx.scene.body_mesh
    normals_next = vertex_normals(next_state.body_pos, body_mesh)
    normals_t = vertex_normals(pre_state.body_pos, body_mesh)
    return physics.total_loss(
        pred,
        pre_state,
        next_state.body_pos,
        normals_next,
        normals_t,
        ctx.scene.garment,
        ctx.rest,
        ctx.weights,
        ctx.scene.gravity,
        ctx.scene.world_radius,
        ctx.scene.contact_margin,
    )


@dataclass
class RolloutResult:
    states: list
    losses: list            # LossBreakdown per completed frame
    latencies_ms: list
    k_steps: int
    mean_edge: float
    diverged: bool = False
    diverged_at: int | None = None

    @property
    def positions(self) -> list:
        return [s.garment_pos for s in self.states]


def run_rollout(
    ctx: SimContext,
    params: net.ModelParams,
    frames: int,
    *,
    compute_losses: bool = True,
    start_state: SimState | None = None,
    start_frame: int = 0,
) -> RolloutResult:
    """Roll the model forward; on numeric divergence the frames completed so
    far are retained and the result is flagged."""
    state = start_state if start_state is not None else ctx.scene.initial_state()
    result = RolloutResult(states=[], losses=[], latencies_ms=[], k_steps=ctx.k_steps, mean_edge=ctx.mean_edge)
    for f in range(frames):
        began = time.perf_counter()
        try:
            next_state, _ = advance(ctx, state, start_frame + f, params)
        except NumericDivergence:
            result.diverged = True
            result.diverged_at = f
            break
        latency = 1000.0 * (time.perf_counter() - began)
        if compute_losses:
            try:
                pred64 = Tensor(next_state.garment_pos.copy())
                _, breakdown = frame_loss(ctx, pred64, state, next_state)
                result.losses.append(breakdown)
            except NumericDivergence:
                result.diverged = True
                result.diverged_at = f
                break
        result.latencies_ms.append(latency)
        result.states.append(next_state)
        state = next_state
    return result


def write_rollout_outputs(result: RolloutResult, scene: Scene, out_dir, metrics_path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for f, state in enumerate(result.states):
        write_obj(out / f"frame_{f:04d}.obj", state.garment_pos, scene.garment.triangles)
    if metrics_path is not None:
        write_metrics_csv(result.losses, metrics_path)


def write_metrics_csv(losses: list, path) -> None:
    lines = ["frame," + ",".join(METRIC_COLUMNS)]
    for f, row in enumerate(losses):
        values = ",".join(repr(getattr(row, c)) for c in METRIC_COLUMNS)
        lines.append(f"{f},{values}")
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def aggregate_losses(losses: list) -> dict:
    if not losses:
        return {c: None for c in METRIC_COLUMNS}
    return {c: float(np.mean([getattr(row, c) for row in losses])) for c in METRIC_COLUMNS}


def evaluation_report(ctx: SimContext, result: RolloutResult) -> dict:
    per_frame = []
    for f, row in enumerate(result.losses):
        entry = {"frame": f}
        entry.update(row.as_dict())
        if f < len(result.latencies_ms):
            entry["latency_ms"] = result.latencies_ms[f]
        per_frame.append(entry)
    return {
        "frames": per_frame,
        "aggregate": aggregate_losses(result.losses),
        "mesh": {
            "vertices": int(ctx.scene.garment.vertex_count),
            "triangles": int(ctx.scene.garment.triangles.shape[0]),
            "mean_edge_length": ctx.mean_edge,
            "k_steps": result.k_steps,
        },
        "latency_ms_mean": float(np.mean(result.latencies_ms)) if result.latencies_ms else None,
        "diverged": result.diverged,
        "diverged_at": result.diverged_at,
    }
