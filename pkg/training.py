import io
import json
import time
import logging
import zipfile
from dataclasses import dataclass, field, replace, asdict
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from sklearn.metrics import accuracy_score, multilabel_confusion_matrix, precision_recall_fscore_support

from autodiff import Tensor, backward
from errors import (ConfigInvalid, CorruptCheckpoint, EmptyDataset, FormatError, SequenceTooShort,
                    ShapeMismatch, TensegrityIOError, VersionMismatch)
from geometry import D3Group, build_canonical_topology, canonical_group
from graphdata import (HeteroGraph, SensorSequence, WindowDataset, CONTACT_COLUMNS, GROUP_MODES, N_ENDCAPS,
                       SUPPORTED_HISTORIES, assemble_graph)
from hgnn import ModelParams, init_params, model_forward, bce_with_logits, predict_contacts

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
HISTORY_COLUMNS = ["epoch", "train_loss", "val_accuracy", "val_macro_f1", "seconds"]
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
PRECISIONS = {"float64": np.float64, "float32": np.float32}
# Fixed zip member timestamp so identical weights give identical checkpoint bytes
ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


@dataclass
class TrainConfig:
    learning_rate: float = 3e-4
    batch_size: int = 256
    epochs: int = 30
    layers: int = 8
    hidden: int = 128
    history_length: int = 100
    seed: int = 0
    symmetry_enabled: bool = True
    group_mode: str = "index-only"
    stride: int = 1
    augment_group: bool = False
    val_fraction: float = 0.2
    max_samples: Optional[int] = None
    precision: str = "float64"
    threshold: float = 0.5

    def validate(self) -> None:
        if self.learning_rate < 0:
            raise ConfigInvalid(f"learning_rate must be >= 0, got {self.learning_rate}")
        for name in ("batch_size", "epochs", "layers", "hidden", "history_length", "stride"):
            if getattr(self, name) < 1:
                raise ConfigInvalid(f"{name} must be positive, got {getattr(self, name)}")
        if self.group_mode not in GROUP_MODES:
            raise ConfigInvalid(f"group_mode must be one of {GROUP_MODES}, got '{self.group_mode}'")
        if self.precision not in PRECISIONS:
            raise ConfigInvalid(f"precision must be one of {sorted(PRECISIONS)}, got '{self.precision}'")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigInvalid(f"val_fraction must be in (0, 1), got {self.val_fraction}")
        if self.max_samples is not None and self.max_samples < 1:
            raise ConfigInvalid(f"max_samples must be positive, got {self.max_samples}")
        if self.history_length not in SUPPORTED_HISTORIES:
            logger.warning(f"history_length {self.history_length} is outside the studied "
                           f"set {SUPPORTED_HISTORIES}")

    @property
    def dtype(self):
        return PRECISIONS[self.precision]


@dataclass
class Metrics:
    """Exact-match accuracy, macro F1 and per-endcap scores"""

    exact_match_accuracy: float
    macro_f1: float
    precision: Tuple[float, ...]
    recall: Tuple[float, ...]
    f1: Tuple[float, ...]
    confusion: Tuple[Tuple[int, int, int, int], ...]  # per endcap: (tn, fp, fn, tp)
    n_windows: int
    inference_ms: float = field(default=0.0, compare=False)

    def to_dict(self) -> Dict:
        return asdict(self)

    def to_frame(self) -> pd.DataFrame:
        """One row per endcap plus an 'all' summary row"""
        rows = []
        for i in range(N_ENDCAPS):
            tn, fp, fn, tp = self.confusion[i]
            rows.append({"endcap": str(i), "precision": self.precision[i], "recall": self.recall[i],
                         "f1": self.f1[i], "tn": tn, "fp": fp, "fn": fn, "tp": tp})
        rows.append({"endcap": "all", "accuracy": self.exact_match_accuracy,
                     "macro_f1": self.macro_f1, "n_windows": self.n_windows,
                     "inference_ms": self.inference_ms})
        return pd.DataFrame(rows)


def compute_metrics(labels: np.ndarray, predictions: np.ndarray, inference_ms: float = 0.0) -> Metrics:
    labels = np.asarray(labels, dtype=np.int64)
    predictions = np.asarray(predictions, dtype=np.int64)
    if len(labels) == 0:
        raise EmptyDataset("no windows to score")
    if labels.shape != predictions.shape:
        raise ShapeMismatch(f"labels {labels.shape} and predictions {predictions.shape} differ")

    precision, recall, f1, _ = precision_recall_fscore_support(
        labels, predictions, average=None, labels=list(range(N_ENDCAPS)), zero_division=0)
    confusion = multilabel_confusion_matrix(labels, predictions, labels=list(range(N_ENDCAPS)))
    return Metrics(
        exact_match_accuracy=float(accuracy_score(labels, predictions)),
        macro_f1=float(np.mean(f1)),
        precision=tuple(float(v) for v in precision),
        recall=tuple(float(v) for v in recall),
        f1=tuple(float(v) for v in f1),
        confusion=tuple(tuple(int(c) for c in matrix.ravel()) for matrix in confusion),
        n_windows=len(labels),
        inference_ms=inference_ms,
    )


class Adam:
    """Adam over a fixed list of parameter tensors"""

    def __init__(self, params: ModelParams, learning_rate: float,
                 betas: Tuple[float, float] = ADAM_BETAS, eps: float = ADAM_EPS):
        self.params = params.parameters()
        self.learning_rate = learning_rate
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.values) for p in self.params]
        self.v = [np.zeros_like(p.values) for p in self.params]

    def step(self) -> None:
        self.step_count += 1
        correction1 = 1.0 - self.beta1 ** self.step_count
        correction2 = 1.0 - self.beta2 ** self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad * p.grad
            update = self.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + self.eps)
            p.values -= update.astype(p.values.dtype)


def _frozen(params: ModelParams) -> ModelParams:
    """Same weights without gradient tracking, for inference"""
    return ModelParams(params.K, params.H, params.L, params.group_mode,
                       {name: Tensor(p.values) for name, p in params.named_parameters()})


def predict_dataset(params: ModelParams, dataset: WindowDataset, symmetry_enabled: bool = True,
                    graph: Optional[HeteroGraph] = None, batch_size: int = 256) -> Tuple[np.ndarray, float]:
    """Logits for every window and the mean inference time per window in ms"""
    graph = graph or assemble_graph(build_canonical_topology())
    group = canonical_group() if symmetry_enabled else None
    frozen = _frozen(params)

    outputs = []
    started = time.perf_counter()
    for start in range(0, len(dataset), batch_size):
        batch = dataset.materialize(np.arange(start, min(start + batch_size, len(dataset))),
                                    dtype=params.dtype)
        outputs.append(model_forward(batch, graph, frozen, group).values)
    elapsed = time.perf_counter() - started
    logits = np.concatenate(outputs) if outputs else np.zeros((0, N_ENDCAPS))
    return logits, 1000.0 * elapsed / max(1, len(dataset))


def _check_scorable(params: ModelParams, dataset: WindowDataset) -> None:
    if len(dataset) == 0:
        raise EmptyDataset("evaluation dataset is empty")
    if not dataset.labeled:
        raise FormatError("evaluation needs labeled sequences")
    if dataset.history_length != params.L:
        raise ShapeMismatch(f"dataset windows have L={dataset.history_length}, model expects L={params.L}")


def evaluate(params: ModelParams, dataset: WindowDataset, symmetry_enabled: bool = True,
             graph: Optional[HeteroGraph] = None, batch_size: int = 256,
             threshold: float = 0.5) -> Metrics:
    """Threshold the (symmetrized) logits and score them against the labels"""
    _check_scorable(params, dataset)

    logits, inference_ms = predict_dataset(params, dataset, symmetry_enabled, graph, batch_size)
    return compute_metrics(dataset.labels(), predict_contacts(logits, threshold), inference_ms)


def evaluate_by_source(params: ModelParams, dataset: WindowDataset, symmetry_enabled: bool = True,
                       graph: Optional[HeteroGraph] = None, batch_size: int = 256,
                       threshold: float = 0.5) -> Dict[str, Metrics]:
    """Metrics per source sequence name (one primitive file each)"""
    _check_scorable(params, dataset)
    logits, inference_ms = predict_dataset(params, dataset, symmetry_enabled, graph, batch_size)
    predictions = predict_contacts(logits, threshold)
    labels = dataset.labels()
    names = np.array(dataset.source_names())

    breakdown = {}
    for name in dict.fromkeys(names):
        mask = names == name
        breakdown[name] = compute_metrics(labels[mask], predictions[mask], inference_ms)
    return breakdown


def predict_sequence(params: ModelParams, seq: SensorSequence, symmetry_enabled: bool = True,
                     threshold: float = 0.5, graph: Optional[HeteroGraph] = None,
                     batch_size: int = 256) -> pd.DataFrame:
    """Contact flags for every row of a sequence; the first L-1 rows are zero and flagged warmup"""
    if len(seq) < params.L:
        raise SequenceTooShort(f"sequence '{seq.name}' has {len(seq)} timesteps, window needs {params.L}")
    windows = WindowDataset([seq], params.L, 1, group_mode=params.group_mode)
    logits, _ = predict_dataset(params, windows, symmetry_enabled, graph, batch_size)

    flags = np.zeros((len(seq), N_ENDCAPS), dtype=np.int64)
    flags[params.L - 1:] = predict_contacts(logits, threshold)
    frame = pd.DataFrame(flags, columns=CONTACT_COLUMNS)
    frame["warmup"] = (np.arange(len(seq)) < params.L - 1).astype(np.int64)
    logger.info(f"Predicted contacts for {len(seq) - params.L + 1} of {len(seq)} rows of '{seq.name}'")
    return frame


def split_dataset(dataset: WindowDataset, fraction: float = 0.8,
                  seed: int = 0) -> Tuple[WindowDataset, WindowDataset]:
    """Seeded random split into (first, second) with round(fraction * n) windows first"""
    if not 0.0 < fraction < 1.0:
        raise ConfigInvalid(f"split fraction must be in (0, 1), got {fraction}")
    order = np.random.default_rng(seed).permutation(len(dataset))
    cut = int(round(fraction * len(dataset)))
    return dataset.subset(np.sort(order[:cut])), dataset.subset(np.sort(order[cut:]))


def subsample(dataset: WindowDataset, max_samples: Optional[int], seed: int = 0) -> WindowDataset:
    """Restrict a dataset to at most max_samples windows"""
    if max_samples is None or len(dataset) <= max_samples:
        return dataset
    chosen = np.random.default_rng(seed).choice(len(dataset), size=max_samples, replace=False)
    logger.info(f"Subsampled {max_samples} of {len(dataset)} windows")
    return dataset.subset(np.sort(chosen))


def augment_with_group(dataset: WindowDataset, group: D3Group,
                       mode: Optional[str] = None) -> WindowDataset:
    """Expand every window by each group action; labels move with the endcaps"""
    if len(group) == 0 or group[0].label != "e":
        raise ConfigInvalid("augmentation group must start with the identity")
    base_group = dataset.group or group
    blocks = []
    for g_index, g in enumerate(group):
        block = dataset.entries.copy()
        for row in range(len(block)):
            current = base_group[int(block[row, 2])]
            block[row, 2] = group.elements.index(group.compose(g, group.by_label(current.label)))
        blocks.append(block)

    augmented = WindowDataset(dataset.sequences, dataset.history_length, dataset.stride,
                              entries=np.concatenate(blocks), group=group,
                              group_mode=mode or dataset.group_mode)
    logger.info(f"Augmented {len(dataset)} windows to {len(augmented)} with {len(group)} group actions")
    return augmented


def train(train_set: WindowDataset, val_set: WindowDataset, config: TrainConfig,
          graph: Optional[HeteroGraph] = None,
          history_path: Optional[str] = None) -> Tuple[ModelParams, pd.DataFrame]:
    """Adam on mean BCE; returns the best-validation-F1 weights and the per-epoch history"""
    config.validate()
    if len(train_set) == 0:
        raise EmptyDataset("training dataset is empty")
    for name, dataset in (("train", train_set), ("validation", val_set)):
        if dataset.history_length != config.history_length:
            raise ShapeMismatch(f"{name} windows have L={dataset.history_length}, "
                                f"config has L={config.history_length}")

    graph = graph or assemble_graph(build_canonical_topology())
    group = canonical_group() if config.symmetry_enabled else None
    init_seed, shuffle_seed = np.random.SeedSequence(config.seed).spawn(2)
    params = init_params(config.layers, config.hidden, config.history_length,
                         seed=np.random.default_rng(init_seed), group_mode=config.group_mode,
                         dtype=config.dtype)
    shuffle_rng = np.random.default_rng(shuffle_seed)
    optimizer = Adam(params, config.learning_rate)

    if len(val_set) == 0:
        logger.warning("Validation set is empty; keeping the final epoch's weights")

    best_params, best_f1 = params.copy(), -1.0
    rows = []
    for epoch in range(1, config.epochs + 1):
        started = time.perf_counter()
        order = shuffle_rng.permutation(len(train_set))
        total_loss = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = train_set.materialize(order[start:start + config.batch_size], dtype=config.dtype)
            loss = bce_with_logits(model_forward(batch, graph, params, group),
                                   batch.labels.astype(config.dtype))
            params.zero_grad()
            backward(loss)
            optimizer.step()
            total_loss += loss.item() * len(batch)
        train_loss = total_loss / len(train_set)

        if len(val_set) > 0:
            metrics = evaluate(params, val_set, config.symmetry_enabled, graph,
                               config.batch_size, config.threshold)
            val_accuracy, val_f1 = metrics.exact_match_accuracy, metrics.macro_f1
        else:
            val_accuracy = val_f1 = float("nan")
        if len(val_set) == 0 or val_f1 > best_f1:
            best_params, best_f1 = params.copy(), val_f1

        seconds = time.perf_counter() - started
        rows.append({"epoch": epoch, "train_loss": train_loss, "val_accuracy": val_accuracy,
                     "val_macro_f1": val_f1, "seconds": seconds})
        logger.info(f"Epoch {epoch}/{config.epochs}: loss={train_loss:.5f} "
                    f"val_acc={val_accuracy:.4f} val_f1={val_f1:.4f} ({seconds:.1f}s)")

    history = pd.DataFrame(rows, columns=HISTORY_COLUMNS)
    if history_path:
        try:
            history.to_csv(history_path, index=False)
        except OSError as e:
            raise TensegrityIOError(f"cannot write {history_path}: {e}")
    return best_params, history


def ablate(train_sequences: Sequence[SensorSequence], test_sequences: Sequence[SensorSequence],
           grid: Sequence[Tuple[int, int]], config: TrainConfig,
           graph: Optional[HeteroGraph] = None) -> pd.DataFrame:
    """Train and score one model per (layers, history_length) setting"""
    graph = graph or assemble_graph(build_canonical_topology())
    rows = []
    for layers, history_length in grid:
        setting = replace(config, layers=layers, history_length=history_length)
        setting.validate()
        logger.info(f"Ablation setting K={layers} L={history_length}")

        windows = WindowDataset(train_sequences, history_length, setting.stride, group_mode=setting.group_mode)
        windows = subsample(windows, setting.max_samples, setting.seed)
        train_set, val_set = split_dataset(windows, 1.0 - setting.val_fraction, setting.seed)
        test_set = WindowDataset(test_sequences, history_length, setting.stride, group_mode=setting.group_mode)

        params, _ = train(train_set, val_set, setting, graph)
        train_metrics = evaluate(params, train_set, setting.symmetry_enabled, graph, setting.batch_size)
        test_metrics = evaluate(params, test_set, setting.symmetry_enabled, graph, setting.batch_size)
        rows.append({"layers": layers, "history_length": history_length,
                     "train_accuracy": train_metrics.exact_match_accuracy,
                     "test_accuracy": test_metrics.exact_match_accuracy,
                     "test_macro_f1": test_metrics.macro_f1,
                     "inference_ms": test_metrics.inference_ms})
    return pd.DataFrame(rows)


def _npy_bytes(array: np.ndarray) -> bytes:
    buffer = io.BytesIO()
    np.save(buffer, array, allow_pickle=False)
    return buffer.getvalue()


def save_checkpoint(params: ModelParams, config: TrainConfig, path: str) -> None:
    """npz container: one member per weight plus a JSON __meta__ string"""
    meta = {"format_version": CHECKPOINT_FORMAT_VERSION, "K": params.K, "H": params.H, "L": params.L,
            "group_mode": params.group_mode, "config": asdict(config)}
    members = {"__meta__": np.array(json.dumps(meta, sort_keys=True))}
    members.update(params.state_dict())

    try:
        with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as archive:
            for name, array in members.items():
                archive.writestr(zipfile.ZipInfo(f"{name}.npy", date_time=ZIP_EPOCH), _npy_bytes(array))
    except OSError as e:
        raise TensegrityIOError(f"cannot write checkpoint {path}: {e}")
    logger.info(f"Saved checkpoint with {params.num_parameters()} parameters to {path}")


def load_checkpoint(path: str) -> Tuple[ModelParams, TrainConfig]:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as e:
        raise TensegrityIOError(f"cannot read checkpoint {path}: {e}")

    try:
        with np.load(io.BytesIO(raw), allow_pickle=False) as archive:
            arrays = {name: archive[name] for name in archive.files}
    except (zipfile.BadZipFile, ValueError, OSError, EOFError, KeyError) as e:
        raise CorruptCheckpoint(f"{path}: unreadable checkpoint ({e})")

    if "__meta__" not in arrays:
        raise CorruptCheckpoint(f"{path}: missing metadata")
    try:
        meta = json.loads(str(arrays.pop("__meta__")))
        version = int(meta["format_version"])
    except (ValueError, KeyError, TypeError) as e:
        raise CorruptCheckpoint(f"{path}: bad metadata ({e})")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise VersionMismatch(f"{path}: checkpoint format {version}, this build reads "
                              f"{CHECKPOINT_FORMAT_VERSION}")

    try:
        config = TrainConfig(**meta["config"])
        params = ModelParams.from_state_dict(meta["K"], meta["H"], meta["L"], meta["group_mode"], arrays)
    except (TypeError, KeyError, ShapeMismatch) as e:
        raise CorruptCheckpoint(f"{path}: inconsistent contents ({e})")
    logger.info(f"Loaded checkpoint K={params.K} H={params.H} L={params.L} from {path}")
    return params, config
