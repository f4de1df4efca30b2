"""Self-supervised training: sample frames from procedural scene rollouts,
predict one step, minimize the composite physics loss by gradient descent.

The experience buffer holds pre-step states generated by rolling each scene
with the current model (free fall before the first refresh, since the initial
network is random); it is refreshed every ``buffer_refresh`` iterations.
Training always happens at the scenes' own (base) resolution; nothing here
ever subdivides a mesh.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from . import network as net
from .control import ControlConfig, calibrate
from .errors import InvalidArgument, NumericDivergence
from .graph import SimState
from .mesh import mean_edge_length, write_obj
from .physics import LossBreakdown, LossWeights
from .rollout import SimContext, advance, frame_loss, run_rollout
from .scenes import BufferedFrame, Scene, sample_frame

TRAIN_LOG_COLUMNS = ("stretch", "bending", "collision", "gravity", "friction", "inertia", "total")


@dataclass
class TrainConfig:
    scenes: list
    iterations: int = 500
    learning_rate: float = 1e-4
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    gamma: float = 0.9
    k_base: int = 8
    processor_depth: int = 3
    latent_dim: int = 128
    weights: LossWeights = field(default_factory=LossWeights)
    grad_clip: float = 1.0
    buffer_refresh: int = 50
    rollout_steps: int = 1

    def __post_init__(self):
        if self.iterations < 1:
            raise InvalidArgument("iterations must be >= 1")
        if self.learning_rate < 0:
            raise InvalidArgument("learning rate must be nonnegative")
        if self.rollout_steps < 1:
            raise InvalidArgument("rollout_steps must be >= 1")
        if self.buffer_refresh < 1:
            raise InvalidArgument("buffer_refresh must be >= 1")

    def network_config(self) -> net.NetworkConfig:
        return net.NetworkConfig(
            latent_dim=self.latent_dim,
            gamma=self.gamma,
            k_steps=self.k_base,
            processor_depth=self.processor_depth,
        )


class Adam:
    """Adaptive moment estimation over the named parameter tensors."""

    def __init__(self, named: dict, lr: float, beta1: float, beta2: float, epsilon: float):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.t = 0
        self.m = {k: np.zeros_like(t.data) for k, t in named.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in named.items()}

    def step(self, named: dict, grads: dict) -> None:
        self.t += 1
        correction1 = 1.0 - self.beta1**self.t
        correction2 = 1.0 - self.beta2**self.t
        for key, tensor in named.items():
            g = grads[key]
            m = self.m[key]
            v = self.v[key]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            m_hat = m / correction1
            v_hat = v / correction2
            tensor.data -= (self.lr * m_hat / (np.sqrt(v_hat) + self.epsilon)).astype(tensor.data.dtype)


def clip_gradients(grads: dict, max_norm: float) -> float:
    total = 0.0
    for g in grads.values():
        total += float((g.astype(np.float64) ** 2).sum())
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for g in grads.values():
            g *= factor
    return norm


# deep interpenetration produces huge one-sided collision gradients that
# teach erratic accelerations, so buffered states keep penetration near the
# scale a resting cloth actually reaches under the cubic penalty
_FREE_FALL_PENETRATION = 0.04
_REROLL_PENETRATION_FRACTION = 0.5


def _free_fall_states(scene: Scene) -> list:
    """Gravity-only rollout used to seed the buffer before the model has
    learned anything; stops at first meaningful body contact (free fall
    ignores collision, so deeper frames would be unphysical)."""
    states = [BufferedFrame(0, scene.initial_state())]
    state = states[0].state
    for f in range(scene.frames - 1):
        vel = state.garment_vel + state.time_step * np.array([0.0, -scene.gravity, 0.0])
        pos = state.garment_pos + state.time_step * vel
        if scene.pinned.size:
            pos[scene.pinned] = scene.pinned_targets()
            vel[scene.pinned] = 0.0
        nxt = SimState(
            garment_pos=pos,
            garment_vel=vel,
            garment_pos_prev=state.garment_pos.copy(),
            body_pos=scene.body_positions(f + 1),
            body_pos_prev=state.body_pos.copy(),
            time_step=state.time_step,
        )
        if scene.max_penetration(pos, f + 1) > _FREE_FALL_PENETRATION:
            break
        states.append(BufferedFrame(f + 1, nxt))
        state = nxt
    return states


def _state_is_sane(scene: Scene, state: SimState, frame: int, extent: float, speed: float, stretch: float) -> bool:
    if np.abs(state.garment_pos).max() > extent:
        return False
    if float(np.linalg.norm(state.garment_vel, axis=1).max()) > speed:
        return False
    if scene.max_penetration(state.garment_pos, frame) > _REROLL_PENETRATION_FRACTION * scene.body.radius:
        return False
    edges = scene.garment.edges
    lengths = np.linalg.norm(state.garment_pos[edges[:, 1]] - state.garment_pos[edges[:, 0]], axis=1)
    ratio = lengths / scene.garment.rest_edge_lengths
    return bool(ratio.max() <= stretch and ratio.min() >= 1.0 / stretch)


def refresh_buffer(
    scene: Scene,
    ctx: SimContext,
    params,
    use_model: bool,
    sane_extent: float = 5.0,
    sane_speed: float = 5.0,
    sane_stretch: float = 2.0,
) -> None:
    """Re-roll the scene with the current model, keeping the prefix of frames
    that stay physically plausible.

    An immature model amplifies its own velocity features over a long
    rollout; frames past the first position, speed, or edge-stretch blow-up
    are worthless as training data, so the roll is truncated there. The
    effective horizon grows by itself as the model stabilizes."""
    if not use_model:
        scene.buffer = _free_fall_states(scene)
        return
    result = run_rollout(ctx, params, scene.frames - 1, compute_losses=False)
    frames = [BufferedFrame(0, scene.initial_state())]
    for f, state in enumerate(result.states):
        if not _state_is_sane(scene, state, f + 1, sane_extent, sane_speed, sane_stretch):
            break
        frames.append(BufferedFrame(f + 1, state))
    if len(frames) < scene.frames // 2:
        # an immature model yields a short usable roll; keep the physical
        # free-fall pool alongside so sampling never degenerates to one state
        seen = {entry.frame for entry in frames}
        frames += [entry for entry in _free_fall_states(scene) if entry.frame not in seen]
        frames.sort(key=lambda entry: entry.frame)
    scene.buffer = frames


@dataclass
class TrainResult:
    params: net.ModelParams
    log: list                 # one LossBreakdown per iteration
    control: ControlConfig
    config: TrainConfig
    l_base: float

    def checkpoint_meta(self) -> dict:
        return {"gamma": self.config.gamma, "k_base": self.config.k_base, "l_base": self.l_base}


def initial_training_params(config: TrainConfig, scenes: list) -> net.ModelParams:
    """The exact model state training starts from."""
    return net.init_params(config.network_config(), seed=config.seed, dtype=np.float32)


def train(config: TrainConfig, scenes: list, diagnostics_dir=None) -> TrainResult:
    """Run the training loop. ``scenes`` are Scene objects (the CLI loads them
    from config paths). Identical config and scenes reproduce the checkpoint
    bitwise."""
    if not scenes:
        raise InvalidArgument("training needs at least one scene")
    rng = np.random.default_rng(config.seed)
    network_config = config.network_config()
    params = initial_training_params(config, scenes)
    named = params.named_tensors()
    optimizer = Adam(named, config.learning_rate, config.beta1, config.beta2, config.epsilon)

    l_base = mean_edge_length(scenes[0].garment)
    ctrl = calibrate(config.k_base, l_base)
    contexts = [
        SimContext.build(scene, network_config, ctrl, weights=config.weights, dtype=np.float32)
        for scene in scenes
    ]

    log: list[LossBreakdown] = []
    for iteration in range(config.iterations):
        if iteration % config.buffer_refresh == 0:
            for scene, ctx in zip(scenes, contexts):
                refresh_buffer(scene, ctx, params, use_model=iteration > 0)

        scene_idx = int(rng.integers(len(scenes))) if len(scenes) > 1 else 0
        scene, ctx = scenes[scene_idx], contexts[scene_idx]
        entry = sample_frame(scene, rng)

        tape = dc.Tape()
        try:
            with dc.recording(tape):
                state, frame = entry.state, entry.frame
                loss_tensor = None
                breakdown = None
                for k in range(config.rollout_steps):
                    next_state, pred = advance(ctx, state, frame + k, params)
                    step_loss, breakdown = frame_loss(ctx, pred, state, next_state)
                    loss_tensor = step_loss if loss_tensor is None else dc.add(loss_tensor, step_loss)
                    state = next_state  # gradients do not flow across steps
        except NumericDivergence as exc:
            _dump_divergence(diagnostics_dir, iteration, entry, scene)
            raise NumericDivergence(f"iteration {iteration}: {exc}") from exc

        tape.backward(loss_tensor)
        grads = {
            key: (t.grad if t.grad is not None else np.zeros_like(t.data)) for key, t in named.items()
        }
        clip_gradients(grads, config.grad_clip)
        optimizer.step(named, grads)
        for t in named.values():
            t.grad = None
        log.append(breakdown)
    return TrainResult(params=params, log=log, control=ctrl, config=config, l_base=l_base)


def _dump_divergence(diagnostics_dir, iteration: int, entry: BufferedFrame, scene: Scene) -> None:
    if diagnostics_dir is None:
        return
    out = Path(diagnostics_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_obj(out / f"diverged_iter{iteration:06d}.obj", entry.state.garment_pos, scene.garment.triangles)
    info = {
        "iteration": iteration,
        "frame": entry.frame,
        "garment_vertices": int(scene.garment.vertex_count),
        "min_y": float(entry.state.garment_pos[:, 1].min()),
        "max_speed": float(np.linalg.norm(entry.state.garment_vel, axis=1).max()),
    }
    with open(out / f"diverged_iter{iteration:06d}.json", "w") as fh:
        json.dump(info, fh, indent=2, sort_keys=True)


def write_train_log(log: list, path) -> None:
    lines = ["iter," + ",".join(TRAIN_LOG_COLUMNS)]
    for i, row in enumerate(log):
        lines.append(f"{i}," + ",".join(repr(getattr(row, c)) for c in TRAIN_LOG_COLUMNS))
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
