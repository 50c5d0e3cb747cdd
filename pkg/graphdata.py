import os
import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import networkx as nx
from numpy.lib.stride_tricks import sliding_window_view

from errors import FormatError, LengthMismatch, SequenceTooShort, TensegrityIOError, ConfigInvalid
from geometry import TensegrityTopology, GroupElement, D3Group, act_on_rows

logger = logging.getLogger(__name__)

N_RODS = 3
N_TENDONS = 9
N_ENDCAPS = 6
IMU_CHANNELS = 6
DEFAULT_HISTORY = 100
SUPPORTED_HISTORIES = (25, 50, 100, 200)
NORMALIZE_EPS = 1e-8

GROUP_MODES = ("index-only", "physical")
# Action of the flip half-turn on a rod IMU frame: (ax, ay, az, wx, wy, wz)
PHYSICAL_FLIP_SIGNS = np.array([1.0, -1.0, -1.0, 1.0, -1.0, -1.0])

IMU_COLUMNS = [f"{q}{axis}{rod}" for rod in range(N_RODS)
               for q, axis in [("a", "x"), ("a", "y"), ("a", "z"), ("w", "x"), ("w", "y"), ("w", "z")]]
TENDON_COLUMNS = [f"l{j}" for j in range(N_TENDONS)]
CONTACT_COLUMNS = [f"c{i}" for i in range(N_ENDCAPS)]
DATASET_HEADER = ["t"] + IMU_COLUMNS + TENDON_COLUMNS + CONTACT_COLUMNS
INFERENCE_HEADER = ["t"] + IMU_COLUMNS + TENDON_COLUMNS
TRAJECTORY_HEADER = ["t", "x", "y", "z", "qw", "qx", "qy", "qz", "vx", "vy", "vz"]
FLOAT_FORMAT = "%.17g"

NODE_TYPES = ("rod", "tendon", "endcap")
EDGE_TYPES = (
    ("rod", "rod_to_endcap", "endcap"),
    ("endcap", "endcap_to_rod", "rod"),
    ("tendon", "tendon_to_endcap", "endcap"),
    ("endcap", "endcap_to_tendon", "tendon"),
)
EDGE_TYPE_NAMES = tuple(name for _, name, _ in EDGE_TYPES)


def as_contact_vector(values: Sequence) -> np.ndarray:
    """Validate a 6-entry binary contact vector"""
    vector = np.asarray(values)
    if vector.shape != (N_ENDCAPS,):
        raise FormatError(f"contact vector must have 6 entries, got shape {vector.shape}")
    if not np.all((vector == 0) | (vector == 1)):
        raise FormatError(f"contact flags must be 0 or 1, got {vector.tolist()}")
    return vector.astype(np.int8)


@dataclass
class SensorSequence:
    """Synchronized rod IMU, tendon length and (optional) contact streams"""

    sample_rate: float
    time: np.ndarray              # (T,) s
    imu: np.ndarray               # (T, 3, 6): a (m/s^2) then w (rad/s), rod frame
    tendon_lengths: np.ndarray    # (T, 9) m
    contacts: Optional[np.ndarray] = None  # (T, 6) in {0, 1}
    name: str = ""

    def __post_init__(self):
        n = len(self.time)
        if self.imu.shape != (n, N_RODS, IMU_CHANNELS):
            raise LengthMismatch(f"imu shape {self.imu.shape} does not match {n} timesteps")
        if self.tendon_lengths.shape != (n, N_TENDONS):
            raise LengthMismatch(f"tendon shape {self.tendon_lengths.shape} does not match {n} timesteps")
        if self.contacts is not None:
            if self.contacts.shape != (n, N_ENDCAPS):
                raise LengthMismatch(f"contacts shape {self.contacts.shape} does not match {n} timesteps")
            if not np.all((self.contacts == 0) | (self.contacts == 1)):
                raise FormatError("contact flags must be 0 or 1")
            self.contacts = self.contacts.astype(np.int8)
        if self.sample_rate <= 0:
            raise ConfigInvalid(f"sample_rate must be positive, got {self.sample_rate}")

    def __len__(self) -> int:
        return len(self.time)

    @property
    def labeled(self) -> bool:
        return self.contacts is not None


@dataclass
class WindowSample:
    """One L-frame window: rod (3, L, 6) and tendon (9, L, 1) features plus a label"""

    rod_features: np.ndarray
    tendon_features: np.ndarray
    label: Optional[np.ndarray]
    window_end_index: int
    normalized: bool = False

    @property
    def history_length(self) -> int:
        return self.rod_features.shape[-2]


@dataclass
class WindowBatch:
    """A stack of windows with a leading batch axis"""

    rod_features: np.ndarray       # (N, 3, L, 6)
    tendon_features: np.ndarray    # (N, 9, L, 1)
    labels: Optional[np.ndarray]   # (N, 6)
    window_end_index: np.ndarray   # (N,)
    sequence_index: np.ndarray     # (N,)

    def __len__(self) -> int:
        return len(self.rod_features)

    @property
    def history_length(self) -> int:
        return self.rod_features.shape[-2]


def slide_windows(seq: SensorSequence, L: int = DEFAULT_HISTORY, stride: int = 1) -> List[WindowSample]:
    """Cut a sequence into raw windows of L frames, labeled at their final frame"""
    if stride < 1 or L < 1:
        raise ConfigInvalid(f"L and stride must be positive, got L={L}, stride={stride}")
    T = len(seq)
    if T < L:
        raise SequenceTooShort(f"sequence '{seq.name}' has {T} timesteps, window needs {L}")

    samples = []
    for start in range(0, T - L + 1, stride):
        end = start + L - 1
        samples.append(WindowSample(
            rod_features=np.transpose(seq.imu[start:end + 1], (1, 0, 2)).copy(),
            tendon_features=seq.tendon_lengths[start:end + 1].T[:, :, None].copy(),
            label=None if seq.contacts is None else seq.contacts[end].copy(),
            window_end_index=end,
        ))
    return samples


def _zscore(values: np.ndarray, time_axis: int) -> np.ndarray:
    mean = values.mean(axis=time_axis, keepdims=True)
    std = values.std(axis=time_axis, keepdims=True)
    return (values - mean) / (std + NORMALIZE_EPS)


def normalize_window(sample: WindowSample) -> WindowSample:
    """Per-channel z-score over the L frames of this window only"""
    return replace(
        sample,
        rod_features=_zscore(sample.rod_features, time_axis=-2),
        tendon_features=_zscore(sample.tendon_features, time_axis=-2),
        normalized=True,
    )


def _channel_signs(g: GroupElement, mode: str) -> Optional[np.ndarray]:
    if mode not in GROUP_MODES:
        raise ConfigInvalid(f"unknown group mode '{mode}', expected one of {GROUP_MODES}")
    if mode == "physical" and g.is_flip:
        return PHYSICAL_FLIP_SIGNS
    return None


def apply_group_to_arrays(g: GroupElement, rod: np.ndarray, tendon: np.ndarray,
                          labels: Optional[np.ndarray] = None,
                          mode: str = "index-only") -> Tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]:
    """Group action on feature arrays with any number of leading batch axes"""
    signs = _channel_signs(g, mode)
    rod_out = act_on_rows(rod, g.rod_perm, axis=-3)
    if signs is not None:
        rod_out = rod_out * signs.astype(rod_out.dtype)
    tendon_out = act_on_rows(tendon, g.tendon_perm, axis=-3)
    labels_out = None if labels is None else act_on_rows(labels, g.endcap_perm, axis=-1)
    return rod_out, tendon_out, labels_out


def apply_group_to_sample(g: GroupElement, sample: WindowSample, mode: str = "index-only") -> WindowSample:
    """Permute rod/tendon blocks and label entries by the element's index permutations"""
    rod, tendon, label = apply_group_to_arrays(g, sample.rod_features, sample.tendon_features,
                                               sample.label, mode)
    return replace(sample, rod_features=rod, tendon_features=tendon, label=label)


@dataclass
class HeteroGraph:
    """Typed directed graph over rod, tendon and endcap nodes"""

    node_counts: Dict[str, int]
    edges: Dict[str, Tuple[np.ndarray, np.ndarray]]
    nx_graph: nx.MultiDiGraph
    _matrices: Dict[Tuple[str, str, str], np.ndarray] = field(default_factory=dict, repr=False)

    @classmethod
    def from_networkx(cls, graph: nx.MultiDiGraph) -> "HeteroGraph":
        counts = {ntype: 0 for ntype in NODE_TYPES}
        for _, data in graph.nodes(data=True):
            counts[data["node_type"]] += 1

        collected = {name: ([], []) for name in EDGE_TYPE_NAMES}
        for (src_type, src), (dst_type, dst), data in graph.edges(data=True):
            collected[data["edge_type"]][0].append(src)
            collected[data["edge_type"]][1].append(dst)
        edges = {name: (np.array(src, dtype=np.int64), np.array(dst, dtype=np.int64))
                 for name, (src, dst) in collected.items()}
        return cls(node_counts=counts, edges=edges, nx_graph=graph)

    @property
    def num_edges(self) -> int:
        return sum(len(src) for src, _ in self.edges.values())

    @staticmethod
    def edge_type_feature(edge_type: str) -> np.ndarray:
        onehot = np.zeros(len(EDGE_TYPE_NAMES))
        onehot[EDGE_TYPE_NAMES.index(edge_type)] = 1.0
        return onehot

    def in_degree(self, node_type: str, index: int) -> int:
        return self.nx_graph.in_degree((node_type, index))

    def gather_matrix(self, edge_type: str, dtype=np.float64) -> np.ndarray:
        """(E, N_src) one-hot rows selecting each edge's source node"""
        key = ("gather", edge_type, np.dtype(dtype).name)
        if key not in self._matrices:
            src_type = _edge_spec(edge_type)[0]
            src, _ = self.edges[edge_type]
            matrix = np.zeros((len(src), self.node_counts[src_type]), dtype=dtype)
            matrix[np.arange(len(src)), src] = 1.0
            self._matrices[key] = matrix
        return self._matrices[key]

    def scatter_matrix(self, edge_type: str, dtype=np.float64) -> np.ndarray:
        """(N_dst, E) incidence summing each edge's message into its destination"""
        key = ("scatter", edge_type, np.dtype(dtype).name)
        if key not in self._matrices:
            dst_type = _edge_spec(edge_type)[2]
            _, dst = self.edges[edge_type]
            matrix = np.zeros((self.node_counts[dst_type], len(dst)), dtype=dtype)
            np.add.at(matrix, (dst, np.arange(len(dst))), 1.0)
            self._matrices[key] = matrix
        return self._matrices[key]


def _edge_spec(edge_type: str) -> Tuple[str, str, str]:
    return EDGE_TYPES[EDGE_TYPE_NAMES.index(edge_type)]


def build_networkx_graph(topology: TensegrityTopology) -> nx.MultiDiGraph:
    graph = nx.MultiDiGraph()
    for i in range(topology.n_rods):
        graph.add_node(("rod", i), node_type="rod")
    for j in range(topology.n_tendons):
        graph.add_node(("tendon", j), node_type="tendon")
    for k in range(topology.n_endcaps):
        graph.add_node(("endcap", k), node_type="endcap")

    for i, rod in enumerate(topology.rods):
        for endcap in rod:
            graph.add_edge(("rod", i), ("endcap", endcap), edge_type="rod_to_endcap")
    for i, rod in enumerate(topology.rods):
        for endcap in rod:
            graph.add_edge(("endcap", endcap), ("rod", i), edge_type="endcap_to_rod")
    for j, tendon in enumerate(topology.tendons):
        for endcap in tendon:
            graph.add_edge(("tendon", j), ("endcap", endcap), edge_type="tendon_to_endcap")
    for j, tendon in enumerate(topology.tendons):
        for endcap in tendon:
            graph.add_edge(("endcap", endcap), ("tendon", j), edge_type="endcap_to_tendon")
    return graph


def assemble_graph(topology: TensegrityTopology) -> HeteroGraph:
    """Heterogeneous graph with rod<->endcap and tendon<->endcap typed edges"""
    graph = HeteroGraph.from_networkx(build_networkx_graph(topology))
    logger.debug(f"Assembled graph with {graph.num_edges} directed edges")
    return graph


class WindowDataset:
    """Lazy index of windows over one or more sequences.

    Each entry is (sequence, end index, group element); windows are sliced,
    transformed and normalized only when a batch is materialized.
    """

    def __init__(self, sequences: Sequence[SensorSequence], history_length: int = DEFAULT_HISTORY,
                 stride: int = 1, entries: Optional[np.ndarray] = None,
                 group: Optional[D3Group] = None, group_mode: str = "index-only"):
        self.sequences = list(sequences)
        self.history_length = history_length
        self.stride = stride
        self.group = group
        self.group_mode = group_mode

        if entries is None:
            rows = []
            for seq_index, seq in enumerate(self.sequences):
                if len(seq) < history_length:
                    logger.warning(f"Skipping '{seq.name}': {len(seq)} timesteps < window {history_length}")
                    continue
                ends = np.arange(history_length - 1, len(seq), stride)
                rows.append(np.column_stack([np.full(len(ends), seq_index), ends, np.zeros(len(ends))]))
            entries = np.concatenate(rows).astype(np.int64) if rows else np.zeros((0, 3), dtype=np.int64)
        self.entries = entries

    def __len__(self) -> int:
        return len(self.entries)

    def subset(self, indices: Sequence[int]) -> "WindowDataset":
        return WindowDataset(self.sequences, self.history_length, self.stride,
                             entries=self.entries[np.asarray(indices, dtype=np.int64)],
                             group=self.group, group_mode=self.group_mode)

    def with_entries(self, entries: np.ndarray, group: Optional[D3Group] = None) -> "WindowDataset":
        return WindowDataset(self.sequences, self.history_length, self.stride, entries=entries,
                             group=group or self.group, group_mode=self.group_mode)

    def concat(self, other: "WindowDataset") -> "WindowDataset":
        if other.history_length != self.history_length:
            raise LengthMismatch("cannot concatenate datasets with different window lengths")
        shifted = other.entries.copy()
        shifted[:, 0] += len(self.sequences)
        return WindowDataset(self.sequences + other.sequences, self.history_length, self.stride,
                             entries=np.concatenate([self.entries, shifted]),
                             group=self.group or other.group, group_mode=self.group_mode)

    @property
    def labeled(self) -> bool:
        return all(seq.labeled for seq in self.sequences)

    def source_names(self) -> List[str]:
        return [self.sequences[int(s)].name for s in self.entries[:, 0]]

    def labels(self) -> np.ndarray:
        """All labels without materializing features"""
        out = np.zeros((len(self), N_ENDCAPS), dtype=np.int8)
        for row, (seq_index, end, g_index) in enumerate(self.entries):
            label = self.sequences[seq_index].contacts[end]
            if g_index:
                label = act_on_rows(label, self.group[int(g_index)].endcap_perm)
            out[row] = label
        return out

    def materialize(self, indices: Optional[Sequence[int]] = None, dtype=np.float64) -> WindowBatch:
        """Slice, transform and normalize the selected windows"""
        if indices is None:
            indices = np.arange(len(self))
        rows = self.entries[np.asarray(indices, dtype=np.int64)]
        L = self.history_length
        n = len(rows)

        rod = np.empty((n, N_RODS, L, IMU_CHANNELS))
        tendon = np.empty((n, N_TENDONS, L, 1))
        labels = np.zeros((n, N_ENDCAPS), dtype=np.int8) if self.labeled else None
        for row, (seq_index, end, _) in enumerate(rows):
            seq = self.sequences[seq_index]
            start = end - L + 1
            rod[row] = np.transpose(seq.imu[start:end + 1], (1, 0, 2))
            tendon[row, :, :, 0] = seq.tendon_lengths[start:end + 1].T
            if labels is not None:
                labels[row] = seq.contacts[end]

        for g_index in np.unique(rows[:, 2]):
            if g_index == 0:
                continue
            mask = rows[:, 2] == g_index
            g = self.group[int(g_index)]
            rod[mask], tendon[mask], moved = apply_group_to_arrays(
                g, rod[mask], tendon[mask], None if labels is None else labels[mask], self.group_mode)
            if labels is not None:
                labels[mask] = moved

        return WindowBatch(
            rod_features=_zscore(rod, time_axis=-2).astype(dtype),
            tendon_features=_zscore(tendon, time_axis=-2).astype(dtype),
            labels=labels,
            window_end_index=rows[:, 1].copy(),
            sequence_index=rows[:, 0].copy(),
        )


def inference_windows(seq: SensorSequence, L: int, dtype=np.float64) -> WindowBatch:
    """All stride-1 normalized windows of a sequence, vectorized"""
    if len(seq) < L:
        raise SequenceTooShort(f"sequence '{seq.name}' has {len(seq)} timesteps, window needs {L}")
    imu = sliding_window_view(seq.imu, L, axis=0)                # (N, 3, 6, L)
    tendon = sliding_window_view(seq.tendon_lengths, L, axis=0)  # (N, 9, L)
    rod = np.transpose(imu, (0, 1, 3, 2))
    ends = np.arange(L - 1, len(seq))
    return WindowBatch(
        rod_features=_zscore(rod, time_axis=-2).astype(dtype),
        tendon_features=_zscore(tendon[..., None], time_axis=-2).astype(dtype),
        labels=None if seq.contacts is None else seq.contacts[ends].copy(),
        window_end_index=ends,
        sequence_index=np.zeros(len(ends), dtype=np.int64),
    )


def _read_csv(path: str) -> pd.DataFrame:
    if not os.path.exists(path):
        raise TensegrityIOError(f"file not found: {path}")
    try:
        return pd.read_csv(path, float_precision="round_trip")
    except pd.errors.ParserError as e:
        raise FormatError(f"{path}: ragged rows ({e})")
    except pd.errors.EmptyDataError:
        raise FormatError(f"{path}: empty file")
    except (OSError, UnicodeDecodeError) as e:
        raise TensegrityIOError(f"cannot read {path}: {e}")


def read_dataset(path: str) -> SensorSequence:
    """Read the dataset CSV (34-column labeled or 28-column inference-only).

    The file carries no sample rate; it is recovered as 1 / median(diff(t)), or 100 Hz for a
    single row. Sensor values and times round-trip exactly, but a jittered time column reads
    back with its median rate rather than the rate it was written with.
    """
    df = _read_csv(path)
    columns = list(df.columns)
    if columns == DATASET_HEADER:
        labeled = True
    elif columns == INFERENCE_HEADER:
        labeled = False
    else:
        raise FormatError(f"{path}: unexpected header with {len(columns)} columns")

    numeric = df[INFERENCE_HEADER]
    if numeric.isnull().values.any():
        raise FormatError(f"{path}: ragged or empty cells")
    try:
        values = numeric.to_numpy(dtype=np.float64)
    except (TypeError, ValueError):
        raise FormatError(f"{path}: non-numeric sensor values")

    contacts = None
    if labeled:
        flags = df[CONTACT_COLUMNS]
        if flags.isnull().values.any():
            raise FormatError(f"{path}: ragged or empty contact cells")
        flags = flags.to_numpy()
        if flags.dtype.kind not in "iuf" or not np.all((flags == 0) | (flags == 1)):
            raise FormatError(f"{path}: contact flags must be 0 or 1")
        contacts = flags.astype(np.int8)

    time = values[:, 0]
    rate = 1.0 / np.median(np.diff(time)) if len(time) > 1 else 100.0
    seq = SensorSequence(
        sample_rate=float(rate),
        time=time,
        imu=values[:, 1:1 + len(IMU_COLUMNS)].reshape(-1, N_RODS, IMU_CHANNELS),
        tendon_lengths=values[:, 1 + len(IMU_COLUMNS):],
        contacts=contacts,
        name=os.path.splitext(os.path.basename(path))[0],
    )
    logger.info(f"Read {len(seq)} timesteps from {path} ({'labeled' if labeled else 'inference-only'})")
    return seq


def write_dataset(path: str, seq: SensorSequence) -> None:
    """Write the dataset CSV with full-precision floats"""
    data = {"t": seq.time}
    flat_imu = seq.imu.reshape(len(seq), -1)
    for index, column in enumerate(IMU_COLUMNS):
        data[column] = flat_imu[:, index]
    for index, column in enumerate(TENDON_COLUMNS):
        data[column] = seq.tendon_lengths[:, index]
    if seq.contacts is not None:
        for index, column in enumerate(CONTACT_COLUMNS):
            data[column] = seq.contacts[:, index].astype(np.int64)

    try:
        pd.DataFrame(data).to_csv(path, index=False, float_format=FLOAT_FORMAT)
    except OSError as e:
        raise TensegrityIOError(f"cannot write {path}: {e}")
    logger.info(f"Wrote {len(seq)} timesteps to {path}")


def write_trajectory(path: str, time: np.ndarray, positions: np.ndarray,
                     quaternions_wxyz: np.ndarray, velocities: np.ndarray) -> None:
    frame = pd.DataFrame(np.column_stack([time, positions, quaternions_wxyz, velocities]),
                         columns=TRAJECTORY_HEADER)
    try:
        frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    except OSError as e:
        raise TensegrityIOError(f"cannot write {path}: {e}")


def read_trajectory(path: str) -> pd.DataFrame:
    df = _read_csv(path)
    if list(df.columns) != TRAJECTORY_HEADER:
        raise FormatError(f"{path}: expected trajectory header {','.join(TRAJECTORY_HEADER)}")
    if df.isnull().values.any():
        raise FormatError(f"{path}: ragged or empty cells")
    return df


def read_contact_predictions(path: str) -> np.ndarray:
    """Per-timestep contact flags from a prediction CSV (c0..c5, extra columns ignored)"""
    df = _read_csv(path)
    if list(df.columns[:N_ENDCAPS]) != CONTACT_COLUMNS:
        raise FormatError(f"{path}: first six columns must be {','.join(CONTACT_COLUMNS)}")
    flags = df[CONTACT_COLUMNS].to_numpy()
    if df[CONTACT_COLUMNS].isnull().values.any() or not np.all((flags == 0) | (flags == 1)):
        raise FormatError(f"{path}: contact flags must be 0 or 1")
    return flags.astype(np.int8)
