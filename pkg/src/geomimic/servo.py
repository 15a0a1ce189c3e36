"""Vision-based control on top of an inferred geometric constraint.

Two modes share one loop. IBVS builds the analytic point-feature
interaction matrix from known intrinsics and simulator depth and steers
the camera; UVS knows nothing about the model, estimates a pixel/actuator
Jacobian from small exploratory motions and keeps it fresh with Broyden
secant updates while steering the scene's mover entity.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from typing import Protocol

import numpy as np

from .geometry import KernelKind
from .scene import SimWorld
from .training import TrainedKernel, infer

_SINGULAR_COND = 1e12


class ServoError(RuntimeError):
    """Servo loop failure."""


class SingularityError(ServoError):
    """Undamped control step through a rank-deficient interaction matrix."""


class ZeroStepError(ServoError):
    """Broyden update with a vanishing actuation step."""


class DivergenceError(ServoError):
    """Error norm exceeded 10x its initial value."""


class LowConfidenceError(ServoError):
    """Inference in the loop no longer trusts any candidate."""


@dataclass
class ServoConfig:
    """Loop settings shared by both modes."""

    mode: str = "ibvs"
    gain: float = 0.1
    damping: float = 1e-6
    tol: float = 1.0
    max_steps: int = 200
    explore_step: float = 1e-4

    def __post_init__(self) -> None:
        if self.mode not in ("ibvs", "uvs"):
            raise ServoError(f"unknown servo mode {self.mode!r}")
        if self.gain <= 0:
            raise ServoError("gain must be positive")
        if self.damping < 0:
            raise ServoError("damping must be >= 0")
        if self.tol <= 0:
            raise ServoError("tol must be positive")
        if self.max_steps < 0:
            raise ServoError("max_steps must be >= 0")
        if self.explore_step <= 0:
            raise ServoError("explore_step must be positive")

    def to_json_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_json_dict(cls, payload: dict) -> "ServoConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(payload) - known
        if unknown:
            raise ServoError(f"unknown servo config keys: {sorted(unknown)}")
        return cls(**payload)


def interaction_matrix_point(x: float, y: float, depth: float) -> np.ndarray:
    """Image motion of a point under a camera velocity screw.

    Coordinates are normalized (pixel offsets divided by focal length);
    columns follow (vx, vy, vz, wx, wy, wz).
    """
    if depth <= 0:
        raise ServoError("interaction matrix needs a positive depth")
    return np.array(
        [
            [-1.0 / depth, 0.0, x / depth, x * y, -(1.0 + x * x), y],
            [0.0, -1.0 / depth, y / depth, 1.0 + y * y, -x * y, -x],
        ]
    )


def control_step(error: np.ndarray, jacobian: np.ndarray, config: ServoConfig) -> np.ndarray:
    """Damped least-squares step dq = -gain * J^T (J J^T + damping I)^-1 e.

    With zero damping the step is the exact least-squares solution;
    rank-deficient systems then raise SingularityError instead of
    producing an unbounded command.
    """
    e = np.asarray(error, dtype=float).ravel()
    j = np.asarray(jacobian, dtype=float).reshape(len(e), -1)
    gram = j @ j.T + config.damping * np.eye(len(e))
    if config.damping == 0.0:
        if np.linalg.matrix_rank(j) < len(e) or np.linalg.cond(gram) > _SINGULAR_COND:
            raise SingularityError("rank-deficient interaction matrix with zero damping")
    return -config.gain * (j.T @ np.linalg.solve(gram, e))


def broyden_update(jacobian: np.ndarray, dq: np.ndarray, de: np.ndarray) -> np.ndarray:
    """Rank-one secant update J' = J + (de - J dq) dq^T / (dq^T dq)."""
    dq = np.asarray(dq, dtype=float).ravel()
    de = np.asarray(de, dtype=float).ravel()
    j = np.asarray(jacobian, dtype=float)
    denom = float(dq @ dq)
    if denom <= 1e-24:
        raise ZeroStepError("Broyden update with a near-zero step")
    return j + np.outer(de - j @ dq, dq) / denom


class Plant(Protocol):
    """Anything the loop can observe and actuate."""

    dof: int

    @property
    def q(self) -> np.ndarray: ...

    def observe(self) -> np.ndarray: ...

    def apply(self, dq: np.ndarray) -> None: ...


@dataclass
class LinearPlant:
    """e(q) = A q + offset; the minimal test harness for UVS."""

    matrix: np.ndarray
    offset: np.ndarray
    q0: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.matrix = np.asarray(self.matrix, dtype=float)
        self.offset = np.asarray(self.offset, dtype=float).ravel()
        self._q = (
            np.zeros(self.matrix.shape[1])
            if self.q0 is None
            else np.asarray(self.q0, dtype=float).ravel().copy()
        )
        self.dof = self.matrix.shape[1]

    @property
    def q(self) -> np.ndarray:
        return self._q.copy()

    def observe(self) -> np.ndarray:
        return self.matrix @ self._q + self.offset

    def apply(self, dq: np.ndarray) -> None:
        self._q = self._q + np.asarray(dq, dtype=float).ravel()


class ScenePlant:
    """Adapter: render the world, infer the constraint, expose its error.

    In ibvs mode the actuator is the 6-dof camera screw and the mover
    entity rides rigidly with the camera, as if held by the hand the
    camera is mounted on. Its projection therefore stays put while the
    target's projection responds to the screw, and ground-truth depth
    gives the analytic interaction matrix of the error. In uvs mode the
    actuator moves the mover entity in the desk plane (adding a rotation
    dof for segment alignment) and only raw pixel errors leave the plant.
    """

    def __init__(
        self,
        world: SimWorld,
        trained: TrainedKernel | None = None,
        mode: str = "ibvs",
        association: tuple[int, ...] | None = None,
    ) -> None:
        if mode not in ("ibvs", "uvs"):
            raise ServoError(f"unknown plant mode {mode!r}")
        if trained is None and association is None:
            raise ServoError("need a trained kernel or a fixed association")
        if mode == "ibvs" and world.kernel_kind is not KernelKind.P2P:
            raise ServoError("analytic interaction matrices only cover point tasks; use uvs")
        self.world = world
        self.trained = trained
        self.mode = mode
        self.association = tuple(association) if association else None
        if mode == "ibvs":
            self.dof = 6
        else:
            self.dof = 3 if world.kernel_kind is KernelKind.L2L else 2
        self._q = np.zeros(self.dof)
        self._pair: tuple[int, int] | None = None

    @property
    def q(self) -> np.ndarray:
        return self._q.copy()

    def observe(self) -> np.ndarray:
        from .training import CandidateInstance, candidate_error

        frame = self.world.render()
        if self.trained is not None:
            result = infer(frame, self.trained)
            if result.low_confidence:
                raise LowConfidenceError("inference does not trust any candidate")
            error = result.error
            entities = result.winner_entities
        else:
            by_id = {o.id: o for o in frame if o.visible}
            entities = self._fixed_entities()
            cand = CandidateInstance(self.world.kernel_kind, entities)
            missing = [fid for fid in cand.feature_ids if fid not in by_id]
            if missing:
                raise ServoError(f"fixed association features {missing} not visible")
            error = candidate_error(cand, by_id)
        if self.world.kernel_kind is KernelKind.P2P:
            # Keep entity order: the error is p_first - p_second.
            self._pair = (entities[0][0], entities[1][0])
        return error.values.copy()

    def _fixed_entities(self) -> tuple[tuple[int, ...], ...]:
        kind = self.world.kernel_kind
        ids = self.association
        if kind is KernelKind.P2P:
            return ((ids[0],), (ids[1],))
        if kind is KernelKind.P2L:
            return ((ids[0],), tuple(ids[1:3]))
        if kind is KernelKind.L2L:
            return (tuple(ids[0:2]), tuple(ids[2:4]))
        return ((ids[0],), tuple(ids[1:6]))

    def interaction(self) -> np.ndarray:
        """Pixel-error interaction matrix of the current point pair."""
        if self.mode != "ibvs":
            raise ServoError("interaction matrices are an ibvs-mode facility")
        if self._pair is None:
            self.observe()
        cam = self.world.camera
        rows = []
        for fid in self._pair:
            if fid in self.world.mover_ids:
                # Held feature: rigid with the camera, zero image motion.
                rows.append(np.zeros((2, 6)))
                continue
            xc = cam.world_to_camera(self.world.positions[fid])
            x, y, depth = xc[0] / xc[2], xc[1] / xc[2], float(xc[2])
            rows.append(interaction_matrix_point(x, y, depth))
        # Error is p_first - p_second in pixels; scale normalized rates by f.
        return cam.f * (rows[0] - rows[1])

    def apply(self, dq: np.ndarray) -> None:
        dq = np.asarray(dq, dtype=float).ravel()
        if dq.shape != (self.dof,):
            raise ServoError(f"expected a {self.dof}-dof command, got shape {dq.shape}")
        if self.mode == "ibvs":
            cam = self.world.camera
            held = {
                fid: cam.world_to_camera(self.world.positions[fid])
                for fid in self.world.mover_ids
            }
            self.world.move_camera(dq)
            cam = self.world.camera
            for fid, xc in held.items():
                # Carried rigidly: same camera-frame coords after the move.
                self.world.positions[fid] = cam.rotation.T @ (xc - cam.translation)
        elif self.dof == 3:
            self.world.move_object(dq[:2], dq[2])
        else:
            self.world.move_object(dq)
        self._q = self._q + dq


@dataclass
class ServoTrajectory:
    """Step-by-step record of one run."""

    mode: str
    q_history: list[np.ndarray]
    error_norms: list[float]
    converged: bool

    @property
    def n_steps(self) -> int:
        return len(self.error_norms)

    def to_csv(self, path: str, config_echo: dict | None = None) -> None:
        dof = len(self.q_history[0]) if self.q_history else 0
        with open(path, "w") as fh:
            if config_echo is not None:
                fh.write("# config: " + json.dumps(config_echo) + "\n")
            cols = ",".join(f"q{i}" for i in range(dof))
            header = "step," + (cols + "," if cols else "") + "error_norm,mode"
            fh.write(header + "\n")
            for step, (q, norm) in enumerate(zip(self.q_history, self.error_norms)):
                qtxt = ",".join(repr(float(x)) for x in q)
                fh.write(f"{step}," + (qtxt + "," if qtxt else "") + f"{norm!r},{self.mode}\n")


def estimate_jacobian(plant: Plant, step: float) -> np.ndarray:
    """Forward-difference Jacobian from one exploratory motion per dof."""
    if step <= 0:
        raise ServoError("exploratory step must be positive")
    e0 = np.asarray(plant.observe(), dtype=float)
    cols = []
    for d in range(plant.dof):
        dq = np.zeros(plant.dof)
        dq[d] = step
        plant.apply(dq)
        cols.append((np.asarray(plant.observe(), dtype=float) - e0) / step)
        plant.apply(-dq)
    return np.stack(cols, axis=1)


def run_loop(
    plant: Plant, config: ServoConfig, j0: np.ndarray | None = None
) -> ServoTrajectory:
    """Drive a plant until its error norm drops below tol.

    In uvs mode the Jacobian starts from ``j0`` when given, otherwise
    from exploratory motions, and is Broyden-updated after every step.
    Raises DivergenceError when the error norm exceeds 10x its start.
    """
    error = np.asarray(plant.observe(), dtype=float)
    start_norm = float(np.linalg.norm(error))
    traj = ServoTrajectory(config.mode, [], [], converged=start_norm < config.tol)
    if traj.converged or config.max_steps == 0:
        return traj

    jacobian = None
    if config.mode == "uvs":
        jacobian = (
            np.asarray(j0, dtype=float)
            if j0 is not None
            else estimate_jacobian(plant, config.explore_step)
        )
    for _ in range(config.max_steps):
        matrix = plant.interaction() if config.mode == "ibvs" else jacobian
        dq = control_step(error, matrix, config)
        plant.apply(dq)
        new_error = np.asarray(plant.observe(), dtype=float)
        if config.mode == "uvs":
            jacobian = broyden_update(jacobian, dq, new_error - error)
        error = new_error
        norm = float(np.linalg.norm(error))
        traj.q_history.append(plant.q)
        traj.error_norms.append(norm)
        if norm < config.tol:
            traj.converged = True
            break
        if norm > 10.0 * start_norm:
            raise DivergenceError(
                f"error norm {norm:.3g} exceeded 10x its initial {start_norm:.3g}"
            )
    return traj


def closed_loop(
    world: SimWorld,
    trained: TrainedKernel | None,
    config: ServoConfig,
    association: tuple[int, ...] | None = None,
) -> ServoTrajectory:
    """Render, infer, and act until the selected constraint is satisfied."""
    plant = ScenePlant(world, trained, config.mode, association)
    return run_loop(plant, config)
