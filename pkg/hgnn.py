import logging
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit, logit

from autodiff import (Tensor, parameter, make_op, matmul, add, relu, concat, reshape,
                      take, index, scale)
from errors import ConfigInvalid, ShapeMismatch
from geometry import GroupElement
from graphdata import (HeteroGraph, WindowSample, WindowBatch, EDGE_TYPES, NODE_TYPES,
                       EDGE_TYPE_NAMES, GROUP_MODES, N_ENDCAPS, N_RODS, N_TENDONS,
                       IMU_CHANNELS, apply_group_to_arrays)

logger = logging.getLogger(__name__)

DEFAULT_LAYERS = 8
DEFAULT_HIDDEN = 128
EDGE_FEATURE_DIM = len(EDGE_TYPE_NAMES)
ENDCAP_INPUT_DIM = 1
BIAS_INIT_STD = 0.1

Features = Union[WindowSample, WindowBatch, Tuple[np.ndarray, np.ndarray]]


@dataclass
class ModelParams:
    """Named weight tensors of the encoders, message-passing layers and decoder"""

    K: int
    H: int
    L: int
    group_mode: str = "index-only"
    weights: Dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.weights[name]

    def parameters(self) -> List[Tensor]:
        return list(self.weights.values())

    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(self.weights.items())

    def zero_grad(self) -> None:
        for p in self.weights.values():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.weights.values())

    @property
    def dtype(self):
        return next(iter(self.weights.values())).dtype

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.values.copy() for name, p in self.weights.items()}

    def copy(self) -> "ModelParams":
        return ModelParams(self.K, self.H, self.L, self.group_mode,
                           {name: parameter(p.values.copy(), name) for name, p in self.weights.items()})

    @classmethod
    def from_state_dict(cls, K: int, H: int, L: int, group_mode: str,
                        arrays: Dict[str, np.ndarray]) -> "ModelParams":
        expected = parameter_shapes(K, H, L)
        if set(arrays) != set(expected):
            missing = sorted(set(expected) - set(arrays))
            raise ShapeMismatch(f"weights do not match K={K}, H={H}, L={L}; missing {missing[:3]}")
        weights = {}
        for name, shape in expected.items():
            if arrays[name].shape != shape:
                raise ShapeMismatch(f"{name}: expected shape {shape}, got {arrays[name].shape}")
            weights[name] = parameter(np.array(arrays[name]), name)
        return cls(K, H, L, group_mode, weights)


def parameter_shapes(K: int, H: int, L: int) -> Dict[str, Tuple[int, ...]]:
    """Shapes of every weight, in canonical order"""
    shapes: Dict[str, Tuple[int, ...]] = {}
    for ntype, fan_in in (("rod", L * IMU_CHANNELS), ("tendon", L), ("endcap", ENDCAP_INPUT_DIM)):
        shapes[f"enc.{ntype}.w1"] = (fan_in, H)
        shapes[f"enc.{ntype}.b1"] = (H,)
        shapes[f"enc.{ntype}.w2"] = (H, H)
        shapes[f"enc.{ntype}.b2"] = (H,)
    for k in range(1, K + 1):
        for etype in EDGE_TYPE_NAMES:
            shapes[f"mp{k}.msg.{etype}.w"] = (H + EDGE_FEATURE_DIM, H)
            shapes[f"mp{k}.msg.{etype}.b"] = (H,)
        for ntype in NODE_TYPES:
            shapes[f"mp{k}.upd.{ntype}.w"] = (2 * H, H)
            shapes[f"mp{k}.upd.{ntype}.b"] = (H,)
    shapes["dec.w1"] = (H, H)
    shapes["dec.b1"] = (H,)
    shapes["dec.w2"] = (H, 1)
    shapes["dec.b2"] = (1,)
    return shapes


def init_params(K: int = DEFAULT_LAYERS, H: int = DEFAULT_HIDDEN, L: int = 100,
                seed: Union[int, np.random.Generator] = 0, group_mode: str = "index-only",
                dtype=np.float64) -> ModelParams:
    """He-normal weights and small random biases"""
    if K < 1 or H < 1 or L < 1:
        raise ConfigInvalid(f"K, H and L must be positive, got K={K}, H={H}, L={L}")
    if group_mode not in GROUP_MODES:
        raise ConfigInvalid(f"unknown group mode '{group_mode}'")

    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    weights = {}
    for name, shape in parameter_shapes(K, H, L).items():
        if len(shape) == 2:
            values = rng.standard_normal(shape) * np.sqrt(2.0 / shape[0])
        else:
            values = rng.standard_normal(shape) * BIAS_INIT_STD
        weights[name] = parameter(values.astype(dtype), name)

    params = ModelParams(K, H, L, group_mode, weights)
    logger.info(f"Initialized model K={K} H={H} L={L} with {params.num_parameters()} parameters")
    return params


def _feature_arrays(sample: Features, params: ModelParams) -> Tuple[np.ndarray, np.ndarray, bool]:
    if isinstance(sample, (WindowSample, WindowBatch)):
        rod, tendon = sample.rod_features, sample.tendon_features
    else:
        rod, tendon = sample
    single = rod.ndim == 3
    if single:
        rod, tendon = rod[None], tendon[None]

    if rod.shape[1:] != (N_RODS, params.L, IMU_CHANNELS):
        raise ShapeMismatch(f"rod features {rod.shape[1:]} do not match model L={params.L}")
    if tendon.shape[1:] != (N_TENDONS, params.L, 1):
        raise ShapeMismatch(f"tendon features {tendon.shape[1:]} do not match model L={params.L}")
    dtype = params.dtype
    return rod.astype(dtype, copy=False), tendon.astype(dtype, copy=False), single


def _linear(x: Tensor, params: ModelParams, prefix: str) -> Tensor:
    return add(matmul(x, params[f"{prefix}.w"]), params[f"{prefix}.b"])


def _mlp(x, params: ModelParams, prefix: str) -> Tensor:
    hidden = relu(add(matmul(x, params[f"{prefix}.w1"]), params[f"{prefix}.b1"]))
    return add(matmul(hidden, params[f"{prefix}.w2"]), params[f"{prefix}.b2"])


def _encode_arrays(rod: np.ndarray, tendon: np.ndarray, params: ModelParams) -> Dict[str, Tensor]:
    batch = rod.shape[0]
    endcap = np.zeros((batch, N_ENDCAPS, ENDCAP_INPUT_DIM), dtype=rod.dtype)
    return {
        "rod": _mlp(Tensor(rod.reshape(batch, N_RODS, -1)), params, "enc.rod"),
        "tendon": _mlp(Tensor(tendon.reshape(batch, N_TENDONS, -1)), params, "enc.tendon"),
        "endcap": _mlp(Tensor(endcap), params, "enc.endcap"),
    }


def encode_inputs(sample: Features, params: ModelParams) -> Dict[str, Tensor]:
    """Initial embeddings per node type, each (B, N, H); unbatched input gives B = 1"""
    rod, tendon, _ = _feature_arrays(sample, params)
    return _encode_arrays(rod, tendon, params)


def message_passing_layer(V: Dict[str, Tensor], graph: HeteroGraph, params: ModelParams,
                          k: int) -> Dict[str, Tensor]:
    """One typed layer: per-edge-type messages, summed at the receiver, fused with the old embedding.

    k counts from 1.
    """
    if not 1 <= k <= params.K:
        raise ConfigInvalid(f"layer index {k} outside 1..{params.K}")
    dtype = params.dtype
    incoming: Dict[str, List[Tensor]] = {ntype: [] for ntype in NODE_TYPES}

    for src_type, etype, dst_type in EDGE_TYPES:
        source = matmul(Tensor(graph.gather_matrix(etype, dtype)), V[src_type])
        onehot = np.broadcast_to(graph.edge_type_feature(etype).astype(dtype),
                                 source.shape[:-1] + (EDGE_FEATURE_DIM,))
        message = relu(_linear(concat([source, Tensor(onehot)], axis=-1), params, f"mp{k}.msg.{etype}"))
        incoming[dst_type].append(matmul(Tensor(graph.scatter_matrix(etype, dtype)), message))

    updated = {}
    for ntype in NODE_TYPES:
        if incoming[ntype]:
            aggregate = incoming[ntype][0]
            for extra in incoming[ntype][1:]:
                aggregate = add(aggregate, extra)
        else:
            aggregate = Tensor(np.zeros(V[ntype].shape, dtype=dtype))
        updated[ntype] = relu(_linear(concat([V[ntype], aggregate], axis=-1), params, f"mp{k}.upd.{ntype}"))
    return updated


def decode(endcap_embeddings: Tensor, params: ModelParams) -> Tensor:
    """(B, 6, H) endcap embeddings to (B, 6) logits"""
    logits = _mlp(endcap_embeddings, params, "dec")
    return reshape(logits, logits.shape[:-1])


def _forward_arrays(rod: np.ndarray, tendon: np.ndarray, graph: HeteroGraph,
                    params: ModelParams) -> Tensor:
    V = _encode_arrays(rod, tendon, params)
    for k in range(1, params.K + 1):
        V = message_passing_layer(V, graph, params, k)
    return decode(V["endcap"], params)


def hgnn_forward(sample: Features, graph: HeteroGraph, params: ModelParams) -> Tensor:
    """Raw endcap logits: (6,) for one window, (B, 6) for a batch"""
    rod, tendon, single = _feature_arrays(sample, params)
    logits = _forward_arrays(rod, tendon, graph, params)
    return reshape(logits, (N_ENDCAPS,)) if single else logits


def sym_forward(sample: Features, graph: HeteroGraph, params: ModelParams,
                group: Sequence[GroupElement]) -> Tensor:
    """Group-averaged logits: mean over g of the inverse-permuted output on the g-transformed input"""
    rod, tendon, single = _feature_arrays(sample, params)
    group = list(group)
    batch = rod.shape[0]

    branches_rod, branches_tendon = [], []
    for g in group:
        moved_rod, moved_tendon, _ = apply_group_to_arrays(g, rod, tendon, None, params.group_mode)
        branches_rod.append(moved_rod)
        branches_tendon.append(moved_tendon)

    stacked = _forward_arrays(np.concatenate(branches_rod), np.concatenate(branches_tendon),
                              graph, params)
    stacked = reshape(stacked, (len(group), batch, N_ENDCAPS))

    total = None
    for branch_index, g in enumerate(group):
        restored = take(index(stacked, branch_index), g.endcap_perm, axis=-1)
        total = restored if total is None else add(total, restored)
    averaged = scale(total, 1.0 / len(group))
    return reshape(averaged, (N_ENDCAPS,)) if single else averaged


def model_forward(sample: Features, graph: HeteroGraph, params: ModelParams,
                  group: Optional[Sequence[GroupElement]] = None) -> Tensor:
    """sym_forward when a group is given, plain hgnn_forward otherwise"""
    if group is None:
        return hgnn_forward(sample, graph, params)
    return sym_forward(sample, graph, params, group)


def bce_with_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean binary cross-entropy over every logit, in the overflow-free fused form"""
    labels = np.asarray(labels, dtype=logits.dtype)
    if labels.shape != logits.shape:
        raise ShapeMismatch(f"labels {labels.shape} do not match logits {logits.shape}")
    x = logits.values
    count = x.size
    per_element = np.maximum(x, 0) - x * labels + np.log1p(np.exp(-np.abs(x)))
    loss = np.asarray(per_element.mean(), dtype=x.dtype)

    def backward_fn(g):
        return (g * (expit(x) - labels) / count,)

    return make_op(loss, (logits,), backward_fn)


def predict_contacts(logits: Union[Tensor, np.ndarray], threshold: float = 0.5) -> np.ndarray:
    """1 where sigmoid(logit) is strictly above the threshold"""
    values = logits.values if isinstance(logits, Tensor) else np.asarray(logits)
    if not 0.0 <= threshold <= 1.0:
        raise ConfigInvalid(f"threshold must be a probability, got {threshold}")
    return (values > logit(threshold)).astype(np.int8)


def contact_probabilities(logits: Union[Tensor, np.ndarray]) -> np.ndarray:
    values = logits.values if isinstance(logits, Tensor) else np.asarray(logits)
    return expit(values)
