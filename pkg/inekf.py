import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from errors import LengthMismatch, NonFiniteInput, SequenceTooShort
from geometry import TensegrityTopology, build_canonical_topology, rod_frames
from graphdata import SensorSequence, N_ENDCAPS, as_contact_vector, read_trajectory
from simkit import GRAVITY_VECTOR, GroundTruth

logger = logging.getLogger(__name__)

BASE_DIM = 9  # rotation, velocity, position


@dataclass
class FilterNoise:
    """Noise standard deviations; covariances are their squares"""

    gyro: float = 1e-4
    accel: float = 1e-2
    contact_slip: float = 1e-3
    measurement: float = 1e-3
    new_contact_variance: float = 1.0   # m^2 per axis
    initial_std: float = 1e-3


@dataclass
class ImuSample:
    accel: np.ndarray   # body-frame specific force, m/s^2
    gyro: np.ndarray    # body-frame angular rate, rad/s
    dt: float

    def __post_init__(self):
        self.accel = np.asarray(self.accel, dtype=float)
        self.gyro = np.asarray(self.gyro, dtype=float)
        if not (np.all(np.isfinite(self.accel)) and np.all(np.isfinite(self.gyro))):
            raise NonFiniteInput("IMU sample contains non-finite values")
        if not np.isfinite(self.dt) or self.dt <= 0:
            raise NonFiniteInput(f"IMU dt must be positive and finite, got {self.dt}")


@dataclass
class EstimatorState:
    rotation: np.ndarray
    velocity: np.ndarray
    position: np.ndarray
    contact_points: Dict[int, np.ndarray] = field(default_factory=dict)
    covariance: np.ndarray = field(default_factory=lambda: np.zeros((BASE_DIM, BASE_DIM)))

    @property
    def dim(self) -> int:
        return BASE_DIM + 3 * len(self.contact_points)

    def block(self, endcap: int) -> int:
        """Start index of an active contact's error block"""
        return BASE_DIM + 3 * list(self.contact_points).index(endcap)

    def copy(self) -> "EstimatorState":
        return EstimatorState(self.rotation.copy(), self.velocity.copy(), self.position.copy(),
                              {i: d.copy() for i, d in self.contact_points.items()},
                              self.covariance.copy())

    def orthonormality_error(self) -> float:
        return float(np.max(np.abs(self.rotation.T @ self.rotation - np.eye(3))))

    @property
    def quaternion_wxyz(self) -> np.ndarray:
        x, y, z, w = Rotation.from_matrix(self.rotation).as_quat()
        return np.array([w, x, y, z])


@dataclass
class EstimatorRun:
    time: np.ndarray
    rotations: np.ndarray
    velocities: np.ndarray
    positions: np.ndarray
    contact_counts: np.ndarray
    final_state: EstimatorState
    drift_percent: Optional[float] = None
    max_orthonormality_error: float = 0.0
    min_covariance_eigenvalue: float = 0.0

    @property
    def quaternions_wxyz(self) -> np.ndarray:
        xyzw = Rotation.from_matrix(self.rotations).as_quat()
        return np.column_stack([xyzw[:, 3], xyzw[:, :3]])


def skew(v: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]],
                     [v[2], 0.0, -v[0]],
                     [-v[1], v[0], 0.0]])


def left_jacobian(phi: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(phi)
    K = skew(phi)
    if theta < 1e-8:
        return np.eye(3) + 0.5 * K
    return (np.eye(3) + (1.0 - np.cos(theta)) / theta ** 2 * K
            + (theta - np.sin(theta)) / theta ** 3 * K @ K)


def _orthonormalize(R: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(R)
    out = u @ vt
    if np.linalg.det(out) < 0:
        u[:, -1] *= -1
        out = u @ vt
    return out


def _symmetrize(P: np.ndarray) -> np.ndarray:
    return 0.5 * (P + P.T)


def adjoint(state: EstimatorState) -> np.ndarray:
    """Adjoint of the extended pose (R, v, p, d_1..d_n)"""
    R = state.rotation
    vectors = [state.velocity, state.position] + list(state.contact_points.values())
    adj = np.zeros((state.dim, state.dim))
    adj[0:3, 0:3] = R
    for j, x in enumerate(vectors):
        start = 3 + 3 * j
        adj[start:start + 3, 0:3] = skew(x) @ R
        adj[start:start + 3, start:start + 3] = R
    return adj


def _exp_update(state: EstimatorState, delta: np.ndarray) -> EstimatorState:
    """Left-multiply the state by the group exponential of a correction vector"""
    phi = delta[0:3]
    dR = Rotation.from_rotvec(phi).as_matrix()
    J = left_jacobian(phi)
    updated = state.copy()
    updated.rotation = _orthonormalize(dR @ state.rotation)
    updated.velocity = dR @ state.velocity + J @ delta[3:6]
    updated.position = dR @ state.position + J @ delta[6:9]
    for endcap, d in state.contact_points.items():
        start = state.block(endcap)
        updated.contact_points[endcap] = dR @ d + J @ delta[start:start + 3]
    return updated


def initial_state(rotation: np.ndarray, velocity: np.ndarray, position: np.ndarray,
                  noise: Optional[FilterNoise] = None) -> EstimatorState:
    noise = noise or FilterNoise()
    return EstimatorState(np.array(rotation, dtype=float), np.array(velocity, dtype=float),
                          np.array(position, dtype=float),
                          covariance=noise.initial_std ** 2 * np.eye(BASE_DIM))


def propagate(state: EstimatorState, imu: ImuSample, noise: Optional[FilterNoise] = None) -> EstimatorState:
    """Strapdown mean propagation with a right-invariant covariance step"""
    noise = noise or FilterNoise()
    dt = imu.dt
    R, v, p = state.rotation, state.velocity, state.position
    world_accel = R @ imu.accel + GRAVITY_VECTOR

    dim = state.dim
    phi = np.eye(dim)
    g_cross = skew(GRAVITY_VECTOR)
    phi[3:6, 0:3] = g_cross * dt
    phi[6:9, 0:3] = 0.5 * g_cross * dt * dt
    phi[6:9, 3:6] = np.eye(3) * dt

    qc = np.zeros((dim, dim))
    qc[0:3, 0:3] = noise.gyro ** 2 * np.eye(3)
    qc[3:6, 3:6] = noise.accel ** 2 * np.eye(3)
    for start in range(BASE_DIM, dim, 3):
        qc[start:start + 3, start:start + 3] = noise.contact_slip ** 2 * np.eye(3)
    phi_adj = phi @ adjoint(state)
    qd = phi_adj @ qc @ phi_adj.T * dt

    out = state.copy()
    out.rotation = _orthonormalize(R @ Rotation.from_rotvec(imu.gyro * dt).as_matrix())
    out.velocity = v + world_accel * dt
    out.position = p + v * dt + 0.5 * world_accel * dt * dt
    out.covariance = _symmetrize(phi @ state.covariance @ phi.T + qd)
    return out


def contact_update(state: EstimatorState, contacts: Sequence[int], body_frame_endcaps: np.ndarray,
                   noise: Optional[FilterNoise] = None) -> EstimatorState:
    """Correct with persisting contacts, then drop contacts that ended and add new ones"""
    noise = noise or FilterNoise()
    contacts = as_contact_vector(contacts)
    body_frame_endcaps = np.asarray(body_frame_endcaps, dtype=float)
    if not np.all(np.isfinite(body_frame_endcaps)):
        raise NonFiniteInput("body-frame endcap positions contain non-finite values")

    out = state.copy()
    persisting = [i for i in out.contact_points if contacts[i] == 1]
    if persisting and np.isfinite(noise.measurement):
        rows = 3 * len(persisting)
        H = np.zeros((rows, out.dim))
        Z = np.zeros(rows)
        for r, endcap in enumerate(persisting):
            start = out.block(endcap)
            H[3 * r:3 * r + 3, 6:9] = -np.eye(3)
            H[3 * r:3 * r + 3, start:start + 3] = np.eye(3)
            Z[3 * r:3 * r + 3] = (out.rotation @ body_frame_endcaps[endcap]
                                  - (out.contact_points[endcap] - out.position))
        N = noise.measurement ** 2 * np.eye(rows)
        P = out.covariance
        S = H @ P @ H.T + N
        K = np.linalg.solve(S, H @ P).T
        corrected = _exp_update(out, K @ Z)
        I_KH = np.eye(out.dim) - K @ H
        corrected.covariance = _symmetrize(I_KH @ P @ I_KH.T + K @ N @ K.T)
        out = corrected

    leaving = [i for i in out.contact_points if contacts[i] == 0]
    if leaving:
        drop = [out.block(i) + axis for i in leaving for axis in range(3)]
        out.covariance = np.delete(np.delete(out.covariance, drop, axis=0), drop, axis=1)
        for endcap in leaving:
            del out.contact_points[endcap]

    for endcap in range(N_ENDCAPS):
        if contacts[endcap] == 1 and endcap not in out.contact_points:
            dim = out.dim
            F = np.zeros((dim + 3, dim))
            F[:dim, :dim] = np.eye(dim)
            F[dim:, 6:9] = np.eye(3)
            out.covariance = F @ out.covariance @ F.T
            out.covariance[dim:, dim:] += noise.new_contact_variance * np.eye(3)
            out.contact_points[endcap] = out.position + out.rotation @ body_frame_endcaps[endcap]

    if not np.all(np.isfinite(out.covariance)):
        raise NonFiniteInput("covariance became non-finite during the contact update")
    return out


def fuse_rod_imu(imu: np.ndarray, frames: np.ndarray) -> np.ndarray:
    """Average the three rod IMUs in the body frame: (T, 3, 6) -> (T, 6)"""
    accel = np.einsum("rij,trj->ti", frames, imu[..., :3]) / len(frames)
    gyro = np.einsum("rij,trj->ti", frames, imu[..., 3:]) / len(frames)
    return np.concatenate([accel, gyro], axis=1)


def drift_percent(final_position: np.ndarray, truth: GroundTruth) -> Optional[float]:
    """Final position error as a percentage of ground-truth path length"""
    path = truth.path_length
    if path <= 0:
        logger.warning("Ground-truth path length is zero; drift is undefined")
        return None
    return float(np.linalg.norm(final_position - truth.positions[-1]) / path * 100.0)


def run_estimator(seq: SensorSequence, contacts_stream: np.ndarray,
                  noise: Optional[FilterNoise] = None, ground_truth: Optional[GroundTruth] = None,
                  start: Optional[EstimatorState] = None,
                  topology: Optional[TensegrityTopology] = None) -> EstimatorRun:
    """Alternate propagation and contact updates over a whole sequence"""
    noise = noise or FilterNoise()
    topology = topology or build_canonical_topology()
    contacts_stream = np.asarray(contacts_stream)
    T = len(seq)
    if T == 0:
        raise SequenceTooShort("cannot estimate over an empty sequence")
    if len(contacts_stream) != T:
        raise LengthMismatch(f"{len(contacts_stream)} contact rows for {T} timesteps")
    if ground_truth is not None and len(ground_truth.time) != T:
        raise LengthMismatch(f"ground truth has {len(ground_truth.time)} poses for {T} timesteps")

    body_imu = fuse_rod_imu(seq.imu, rod_frames(topology))
    endcaps = np.asarray(topology.endcap_positions)

    if start is not None:
        state = start.copy()
    elif ground_truth is not None:
        state = initial_state(ground_truth.rotations[0], ground_truth.velocities[0],
                              ground_truth.positions[0], noise)
    else:
        state = initial_state(np.eye(3), np.zeros(3), np.array([0.0, 0.0, -endcaps[:, 2].min()]), noise)

    rotations = np.zeros((T, 3, 3))
    velocities = np.zeros((T, 3))
    positions = np.zeros((T, 3))
    counts = np.zeros(T, dtype=np.int64)
    worst_orthonormality, lowest_eigenvalue = 0.0, np.inf

    state = contact_update(state, contacts_stream[0], endcaps, noise)
    for k in range(T):
        if k > 0:
            dt = float(seq.time[k] - seq.time[k - 1])
            state = propagate(state, ImuSample(body_imu[k - 1, :3], body_imu[k - 1, 3:], dt), noise)
            state = contact_update(state, contacts_stream[k], endcaps, noise)
        rotations[k], velocities[k], positions[k] = state.rotation, state.velocity, state.position
        counts[k] = len(state.contact_points)
        worst_orthonormality = max(worst_orthonormality, state.orthonormality_error())
        lowest_eigenvalue = min(lowest_eigenvalue, float(np.linalg.eigvalsh(state.covariance)[0]))

    drift = drift_percent(positions[-1], ground_truth) if ground_truth is not None else None
    if drift is not None:
        logger.info(f"Estimated {T} steps of '{seq.name}': drift {drift:.3f}% of path")
    return EstimatorRun(time=np.asarray(seq.time).copy(), rotations=rotations, velocities=velocities,
                        positions=positions, contact_counts=counts, final_state=state,
                        drift_percent=drift, max_orthonormality_error=worst_orthonormality,
                        min_covariance_eigenvalue=lowest_eigenvalue)


def load_ground_truth(path: str) -> GroundTruth:
    """Read a <stem>_gt.csv trajectory written by the simulator"""
    frame = read_trajectory(path)
    quaternions = frame[["qx", "qy", "qz", "qw"]].to_numpy()
    return GroundTruth(time=frame["t"].to_numpy(), positions=frame[["x", "y", "z"]].to_numpy(),
                       rotations=Rotation.from_quat(quaternions).as_matrix(),
                       velocities=frame[["vx", "vy", "vz"]].to_numpy())
