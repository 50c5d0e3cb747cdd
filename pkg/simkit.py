"""
Kinematic tumbling model of a rolling 3-bar tensegrity.

The prism is rigid; each gait cycle rests on a hull face and then tips about
one edge of that face onto the neighbouring face. This is a scripted surrogate
for a physics simulator: contact semantics, graph structure and symmetry are
right, dynamics are not modelled.
"""
import os
import logging
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.spatial import ConvexHull
from scipy.spatial.transform import Rotation

from errors import ConfigInvalid
from geometry import TensegrityTopology, build_canonical_topology, rod_frames
from graphdata import SensorSequence, write_dataset, write_trajectory, N_RODS, IMU_CHANNELS

logger = logging.getLogger(__name__)

GRAVITY = 9.81
GRAVITY_VECTOR = np.array([0.0, 0.0, -GRAVITY])

PRIMITIVES = ("F", "B", "FL", "FR", "BL", "BR")
TURNING_RATIOS = (1.0, 0.8, 0.6, 0.4, 0.2)
TURNING_PRIMITIVES = ("FR", "FL", "BR", "BL")

# Commanded heading and turn direction (+1 counterclockwise) per primitive
PRIMITIVE_HEADING = {"F": 0.0, "B": np.pi, "FL": 0.0, "FR": 0.0, "BL": np.pi, "BR": np.pi}
PRIMITIVE_TURN = {"F": 0, "B": 0, "FL": 1, "FR": -1, "BL": 1, "BR": -1}
PRIMITIVE_PHASE = {name: 2.0 * np.pi * i / len(PRIMITIVES) for i, name in enumerate(PRIMITIVES)}

BASE_AMPLITUDE = 0.02      # fraction of nominal length, continuous gait modulation
TUMBLE_AMPLITUDE = 0.08    # fraction of nominal length, contraction of pivot tendons while tipping
TURN_ASYMMETRY = 0.25      # side-cable amplitude asymmetry per unit of (2 - turning_ratio)
SIDE_CABLE_SIDE = {6: 1.0, 7: 0.0, 8: -1.0}
LOOKAHEAD_STEPS = 2.0


@dataclass
class SensorNoise:
    accel: float = 0.05     # m/s^2
    gyro: float = 0.005     # rad/s
    tendon: float = 0.001   # m


@dataclass
class SimConfig:
    primitive: str = "F"
    turning_ratio: float = 1.0
    duration: float = 60.0
    sample_rate: float = 100.0
    noise_accel: float = 0.05
    noise_gyro: float = 0.005
    noise_tendon: float = 0.001
    contact_height_tolerance: float = 0.005
    seed: int = 0
    rest_time: float = 0.3
    tumble_time: float = 0.6
    turn_step_deg: float = 6.0
    history_length: int = 100

    def validate(self) -> None:
        if self.primitive not in PRIMITIVES:
            raise ConfigInvalid(f"primitive must be one of {PRIMITIVES}, got '{self.primitive}'")
        if not 0.0 < self.turning_ratio <= 1.0:
            raise ConfigInvalid(f"turning_ratio must be in (0, 1], got {self.turning_ratio}")
        if self.sample_rate <= 0:
            raise ConfigInvalid(f"sample_rate must be positive, got {self.sample_rate}")
        if self.duration < 0:
            raise ConfigInvalid(f"duration must be >= 0, got {self.duration}")
        if min(self.noise_accel, self.noise_gyro, self.noise_tendon) < 0:
            raise ConfigInvalid("noise standard deviations must be >= 0")
        if self.contact_height_tolerance <= 0:
            raise ConfigInvalid("contact_height_tolerance must be positive")
        if self.rest_time < 0 or self.tumble_time <= 0:
            raise ConfigInvalid("rest_time must be >= 0 and tumble_time > 0")
        if self.n_samples < 1:
            raise ConfigInvalid(f"duration {self.duration} s at {self.sample_rate} Hz gives no samples")
        if self.n_samples < self.history_length:
            logger.warning(f"{self.n_samples} samples is shorter than one {self.history_length}-frame "
                           f"window; windowing this sequence will fail")

    @property
    def n_samples(self) -> int:
        return int(round(self.duration * self.sample_rate))

    @property
    def noise(self) -> SensorNoise:
        return SensorNoise(self.noise_accel, self.noise_gyro, self.noise_tendon)

    @property
    def stem(self) -> str:
        return f"{self.primitive}_r{self.turning_ratio:.1f}_s{self.seed}"


@dataclass
class GroundTruth:
    """Body poses at the sample times (body frame = canonical prism frame, origin at the centroid)"""

    time: np.ndarray
    positions: np.ndarray     # (T, 3)
    rotations: np.ndarray     # (T, 3, 3) body -> world
    velocities: np.ndarray    # (T, 3)

    @property
    def quaternions_wxyz(self) -> np.ndarray:
        xyzw = Rotation.from_matrix(self.rotations).as_quat()
        return np.column_stack([xyzw[:, 3], xyzw[:, :3]])

    @property
    def path_length(self) -> float:
        return float(np.sum(np.linalg.norm(np.diff(self.positions, axis=0), axis=1)))


@dataclass
class SimulationResult:
    sequence: SensorSequence
    ground_truth: GroundTruth
    endcap_heights: np.ndarray  # (T, 6)


@dataclass
class _Tumble:
    rotation0: np.ndarray
    position0: np.ndarray
    axis: np.ndarray
    pivot: np.ndarray
    angle: float
    pivot_endcaps: Tuple[int, int]


class TumbleScript:
    """Plans the face-to-face tumbles of one run and evaluates the body pose at any time"""

    def __init__(self, topology: TensegrityTopology, config: SimConfig):
        self.topology = topology
        self.config = config
        self.body_points = np.asarray(topology.endcap_positions)
        self.hull = ConvexHull(self.body_points)
        self.cycle = config.rest_time + config.tumble_time
        self.step_length = self._mean_step_length()
        self.tumbles: List[_Tumble] = []

        bottom = tuple(sorted(i for i in range(6) if self.body_points[i, 2] < 0))
        self.face = self._face_index(bottom)
        self.rotation = np.eye(3)
        self.position = np.array([0.0, 0.0, -self.body_points[:, 2].min()])
        self.heading = PRIMITIVE_HEADING[config.primitive]
        self.reference = self.position[:2].copy()

    def _face_index(self, vertices: Tuple[int, ...]) -> int:
        for index, simplex in enumerate(self.hull.simplices):
            if tuple(sorted(simplex)) == vertices:
                return index
        raise ConfigInvalid(f"endcaps {vertices} do not form a hull face")

    def _mean_step_length(self) -> float:
        distances = []
        for simplex in self.hull.simplices:
            centroid = self.body_points[simplex].mean(axis=0)
            for j in range(3):
                a, b = simplex[(j + 1) % 3], simplex[(j + 2) % 3]
                distances.append(np.linalg.norm(0.5 * (self.body_points[a] + self.body_points[b]) - centroid))
        return 2.0 * float(np.mean(distances))

    def _plan_next(self) -> None:
        config = self.config
        turn = PRIMITIVE_TURN[config.primitive]
        self.heading += turn * np.deg2rad(config.turn_step_deg) * (2.0 - config.turning_ratio)
        direction = np.array([np.cos(self.heading), np.sin(self.heading)])
        self.reference = self.reference + self.step_length * direction

        world = self.body_points @ self.rotation.T + self.position
        simplex = self.hull.simplices[self.face]
        centroid = world[simplex].mean(axis=0)
        target = self.reference + LOOKAHEAD_STEPS * self.step_length * direction
        wanted = target - centroid[:2]
        wanted = wanted / max(np.linalg.norm(wanted), 1e-12)

        best, best_score = 0, -np.inf
        for j in range(3):
            a, b = simplex[(j + 1) % 3], simplex[(j + 2) % 3]
            outward = (0.5 * (world[a] + world[b]) - centroid)[:2]
            score = float(np.dot(outward, wanted) / max(np.linalg.norm(outward), 1e-12))
            if score > best_score:
                best, best_score = j, score

        a, b = simplex[(best + 1) % 3], simplex[(best + 2) % 3]
        next_face = int(self.hull.neighbors[self.face][best])
        normal = self.rotation @ self.hull.equations[next_face, :3]
        current_normal = self.rotation @ self.hull.equations[self.face, :3]
        angle = float(np.arccos(np.clip(np.dot(normal, current_normal), -1.0, 1.0)))

        edge = world[b] - world[a]
        edge = edge / np.linalg.norm(edge)
        down = np.array([0.0, 0.0, -1.0])
        axis = edge
        if np.dot(Rotation.from_rotvec(angle * edge).apply(normal), down) < \
                np.dot(Rotation.from_rotvec(-angle * edge).apply(normal), down):
            axis = -edge

        tumble = _Tumble(self.rotation.copy(), self.position.copy(), axis, world[a].copy(), angle,
                         (int(a), int(b)))
        self.tumbles.append(tumble)

        step = Rotation.from_rotvec(angle * axis).as_matrix()
        self.rotation = step @ self.rotation
        u, _, vt = np.linalg.svd(self.rotation)
        self.rotation = u @ vt
        self.position = tumble.pivot + step @ (self.position - tumble.pivot)
        self.face = next_face
        logger.debug(f"Tumble {len(self.tumbles)} about endcaps ({a},{b}) by {np.degrees(angle):.1f} deg")

    def tumble(self, index: int) -> _Tumble:
        while len(self.tumbles) <= index:
            self._plan_next()
        return self.tumbles[index]

    def phase(self, t: float) -> Tuple[int, float]:
        """(cycle index, tumble progress in [0, 1]; 0 while resting)"""
        cycle = int(np.floor(t / self.cycle + 1e-12))
        into = t - cycle * self.cycle
        if into < self.config.rest_time:
            return cycle, 0.0
        return cycle, min(1.0, (into - self.config.rest_time) / self.config.tumble_time)

    def pose(self, t: float) -> Tuple[np.ndarray, np.ndarray]:
        cycle, progress = self.phase(t)
        tumble = self.tumble(cycle)
        if progress == 0.0:
            return tumble.rotation0, tumble.position0
        theta = tumble.angle * 0.5 * (1.0 - np.cos(np.pi * progress))
        step = Rotation.from_rotvec(theta * tumble.axis).as_matrix()
        return step @ tumble.rotation0, tumble.pivot + step @ (tumble.position0 - tumble.pivot)


def _zero_order_hold_accel(points: np.ndarray, dt: float) -> Tuple[np.ndarray, np.ndarray]:
    """Per-interval constant accelerations that reproduce sampled positions exactly.

    points is (T+1, ..., 3) starting at rest; returns (accel, velocity), each (T, ..., 3).
    """
    steps = len(points) - 1
    velocity = np.zeros(points.shape[1:])
    accels = np.zeros((steps,) + points.shape[1:])
    velocities = np.zeros((steps,) + points.shape[1:])
    for k in range(steps):
        velocities[k] = velocity
        accels[k] = 2.0 * (points[k + 1] - points[k] - velocity * dt) / (dt * dt)
        velocity = velocity + accels[k] * dt
    return accels, velocities


def _tendon_lengths(script: TumbleScript, topology: TensegrityTopology, times: np.ndarray,
                    config: SimConfig) -> np.ndarray:
    nominal = topology.nominal_tendon_lengths()
    frequency = 1.0 / script.cycle
    phase = PRIMITIVE_PHASE[config.primitive]
    turn = PRIMITIVE_TURN[config.primitive]
    offsets = 2.0 * np.pi * np.arange(len(nominal)) / len(nominal)

    asymmetry = np.zeros(len(nominal))
    for j, side in SIDE_CABLE_SIDE.items():
        asymmetry[j] = turn * side * TURN_ASYMMETRY * (2.0 - config.turning_ratio)

    lengths = np.zeros((len(times), len(nominal)))
    for k, t in enumerate(times):
        cycle, progress = script.phase(t)
        pivot = script.tumble(cycle).pivot_endcaps
        touches = np.array([1.0 if (a in pivot or b in pivot) else 0.0 for a, b in topology.tendons])
        contraction = TUMBLE_AMPLITUDE * touches * (1.0 + asymmetry) * np.sin(np.pi * progress)
        lengths[k] = nominal * (1.0 + BASE_AMPLITUDE * np.sin(2.0 * np.pi * frequency * t + phase + offsets)
                                - contraction)
    return lengths


def add_sensor_noise(seq: SensorSequence, noise: SensorNoise, seed: int = 0) -> SensorSequence:
    """i.i.d. zero-mean Gaussian noise on IMU and tendon channels; contacts untouched"""
    rng = np.random.default_rng(seed)
    imu = seq.imu.copy()
    imu[..., :3] += rng.normal(0.0, noise.accel, imu[..., :3].shape) if noise.accel > 0 else 0.0
    imu[..., 3:] += rng.normal(0.0, noise.gyro, imu[..., 3:].shape) if noise.gyro > 0 else 0.0
    tendons = seq.tendon_lengths.copy()
    if noise.tendon > 0:
        tendons += rng.normal(0.0, noise.tendon, tendons.shape)
    return replace(seq, imu=imu, tendon_lengths=tendons,
                   contacts=None if seq.contacts is None else seq.contacts.copy())


def simulate_with_ground_truth(config: SimConfig,
                               topology: Optional[TensegrityTopology] = None) -> SimulationResult:
    """Run the scripted gait and return the labeled sensor stream plus ground-truth poses"""
    config.validate()
    topology = topology or build_canonical_topology()
    script = TumbleScript(topology, config)
    frames = rod_frames(topology)

    n = config.n_samples
    dt = 1.0 / config.sample_rate
    times = np.arange(n + 1) * dt

    rotations = np.zeros((n + 1, 3, 3))
    positions = np.zeros((n + 1, 3))
    for k, t in enumerate(times):
        rotations[k], positions[k] = script.pose(t)

    body = np.asarray(topology.endcap_positions)
    rod_centres = np.array([0.5 * (body[a] + body[b]) for a, b in topology.rods])
    centre_world = np.einsum("kij,rj->kri", rotations, rod_centres) + positions[:, None, :]
    points = np.concatenate([positions[:, None, :], centre_world], axis=1)  # body origin, then rods
    accels, velocities = _zero_order_hold_accel(points, dt)

    specific_force = accels[:, 1:, :] - GRAVITY_VECTOR
    body_force = np.einsum("kij,kri->krj", rotations[:-1], specific_force)
    relative = np.einsum("kji,kjl->kil", rotations[:-1], rotations[1:])
    body_rate = Rotation.from_matrix(relative).as_rotvec() / dt

    imu = np.zeros((n, N_RODS, IMU_CHANNELS))
    for i in range(N_RODS):
        imu[:, i, :3] = body_force[:, i, :] @ frames[i]
        imu[:, i, 3:] = body_rate @ frames[i]

    heights = (np.einsum("kij,ej->kei", rotations[:-1], body) + positions[:-1, None, :])[..., 2]
    contacts = (heights < config.contact_height_tolerance).astype(np.int8)

    clean = SensorSequence(
        sample_rate=config.sample_rate,
        time=times[:-1].copy(),
        imu=imu,
        tendon_lengths=_tendon_lengths(script, topology, times[:-1], config),
        contacts=contacts,
        name=config.stem,
    )
    noise_seed = int(np.random.SeedSequence(config.seed).generate_state(1)[0])
    sequence = add_sensor_noise(clean, config.noise, noise_seed)
    truth = GroundTruth(time=times[:-1].copy(), positions=positions[:-1].copy(),
                        rotations=rotations[:-1].copy(), velocities=velocities[:, 0, :].copy())

    logger.info(f"Simulated {config.primitive} at ratio {config.turning_ratio}: {n} samples, "
                f"{len(script.tumbles)} tumbles planned, path {truth.path_length:.2f} m")
    return SimulationResult(sequence=sequence, ground_truth=truth, endcap_heights=heights)


def simulate(config: SimConfig, topology: Optional[TensegrityTopology] = None) -> SensorSequence:
    return simulate_with_ground_truth(config, topology).sequence


def ground_truth_path(dataset_path: str) -> str:
    stem, _ = os.path.splitext(dataset_path)
    return f"{stem}_gt.csv"


def write_simulation(result: SimulationResult, path: str) -> Tuple[str, str]:
    """Write the dataset CSV and its <stem>_gt.csv ground-truth trajectory"""
    write_dataset(path, result.sequence)
    truth = result.ground_truth
    gt_path = ground_truth_path(path)
    write_trajectory(gt_path, truth.time, truth.positions, truth.quaternions_wxyz, truth.velocities)
    return path, gt_path


def primitive_suite(base: SimConfig) -> List[SimConfig]:
    return [replace(base, primitive=name) for name in PRIMITIVES]


def turning_suite(base: SimConfig) -> List[SimConfig]:
    return [replace(base, primitive=name, turning_ratio=ratio)
            for name in TURNING_PRIMITIVES for ratio in TURNING_RATIOS]


def generate_suite(configs: List[SimConfig], out_dir: str) -> Dict[str, str]:
    """Simulate and write each configuration; returns stem -> dataset path"""
    os.makedirs(out_dir, exist_ok=True)
    written = {}
    for config in configs:
        path = os.path.join(out_dir, f"{config.stem}.csv")
        write_simulation(simulate_with_ground_truth(config), path)
        written[config.stem] = path
        logger.info(f"Wrote {path}")
    return written
