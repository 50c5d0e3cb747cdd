import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import networkx as nx
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from errors import GeometryMismatch, ClosureViolation

logger = logging.getLogger(__name__)

CIRCUMRADIUS = 0.18          # m, endcap distance from rod_axis
TRIANGLE_SEPARATION = 0.22   # m, along rod_axis between top and bottom triangles
TWIST_DEG = 150.0            # azimuth of endcap k+3 relative to endcap k
MATCH_TOLERANCE = 1e-6       # m

GROUP_LABELS = ("e", "r", "r2", "f", "fr", "fr2")
FLIP_LABELS = frozenset({"f", "fr", "fr2"})

Edge = Tuple[int, int]


@dataclass(frozen=True)
class TensegrityTopology:
    """Canonical labeling of a 3-bar prism: 6 endcaps, 3 rods, 9 tendons"""

    endcap_positions: np.ndarray
    rods: Tuple[Edge, ...]
    tendons: Tuple[Edge, ...]
    rod_axis: np.ndarray

    @property
    def n_endcaps(self) -> int:
        return len(self.endcap_positions)

    @property
    def n_rods(self) -> int:
        return len(self.rods)

    @property
    def n_tendons(self) -> int:
        return len(self.tendons)

    def endcap_rod(self) -> Dict[int, int]:
        """Map endcap index -> index of the rod it terminates"""
        owner = {}
        for rod_index, (a, b) in enumerate(self.rods):
            owner[a] = rod_index
            owner[b] = rod_index
        return owner

    def nominal_tendon_lengths(self) -> np.ndarray:
        pos = self.endcap_positions
        return np.array([np.linalg.norm(pos[a] - pos[b]) for a, b in self.tendons])

    def validate(self) -> None:
        """Raise GeometryMismatch if any topology invariant is violated"""
        n = self.n_endcaps
        if self.endcap_positions.shape != (6, 3) or len(self.rods) != 3 or len(self.tendons) != 9:
            raise GeometryMismatch("expected 6 endcaps, 3 rods and 9 tendons")

        rod_members = sorted(i for rod in self.rods for i in rod)
        if rod_members != list(range(n)):
            raise GeometryMismatch(f"rods do not partition the endcaps: {self.rods}")

        cables = nx.MultiGraph()
        cables.add_nodes_from(range(n))
        cables.add_edges_from(self.tendons)
        degrees = dict(cables.degree())
        if any(degrees[i] != 3 for i in range(n)):
            raise GeometryMismatch(f"endcap tendon degrees must all be 3, got {degrees}")

        rod_pairs = {frozenset(rod) for rod in self.rods}
        if any(frozenset(t) in rod_pairs for t in self.tendons):
            raise GeometryMismatch("a tendon duplicates a rod's endcap pair")

        if abs(np.linalg.norm(self.rod_axis) - 1.0) > 1e-12:
            raise GeometryMismatch("rod_axis must be a unit vector")

        rotated = Rotation.from_rotvec(2.0 * np.pi / 3.0 * self.rod_axis).apply(self.endcap_positions)
        match_points(rotated, self.endcap_positions)


def build_canonical_topology() -> TensegrityTopology:
    """Build the fixed canonical prism: top triangle 0-2, bottom 3-5, rod i = (i, i+3)"""
    half = TRIANGLE_SEPARATION / 2.0
    positions = np.zeros((6, 3))
    for k in range(3):
        top = np.deg2rad(120.0 * k)
        bottom = np.deg2rad(120.0 * k + TWIST_DEG)
        positions[k] = (CIRCUMRADIUS * np.cos(top), CIRCUMRADIUS * np.sin(top), half)
        positions[k + 3] = (CIRCUMRADIUS * np.cos(bottom), CIRCUMRADIUS * np.sin(bottom), -half)
    positions.setflags(write=False)

    axis = np.array([0.0, 0.0, 1.0])
    axis.setflags(write=False)

    topology = TensegrityTopology(
        endcap_positions=positions,
        rods=((0, 3), (1, 4), (2, 5)),
        tendons=((0, 1), (1, 2), (2, 0),
                 (3, 4), (4, 5), (5, 3),
                 (0, 4), (1, 5), (2, 3)),
        rod_axis=axis,
    )
    topology.validate()
    return topology


def rod_frames(topology: TensegrityTopology) -> np.ndarray:
    """Per-rod IMU mounting frames as (3, 3, 3) rotations, rod frame -> body frame.

    z runs along the rod from its first to its second endcap, x points radially
    away from rod_axis through the rod centre, y completes a right-handed frame.
    """
    pos = topology.endcap_positions
    axis = topology.rod_axis
    frames = np.zeros((topology.n_rods, 3, 3))
    for i, (a, b) in enumerate(topology.rods):
        z = pos[b] - pos[a]
        z = z / np.linalg.norm(z)
        centre = 0.5 * (pos[a] + pos[b])
        radial = centre - np.dot(centre, axis) * axis
        x = radial - np.dot(radial, z) * z
        norm = np.linalg.norm(x)
        if norm < 1e-9:
            raise GeometryMismatch(f"rod {i} passes through rod_axis; frame undefined")
        x = x / norm
        y = np.cross(z, x)
        frames[i] = np.column_stack([x, y, z])
    return frames


@dataclass(frozen=True)
class GroupElement:
    """One D3 element as coordinated endcap/rod/tendon index permutations.

    perm[i] is the index that item i is carried to.
    """

    label: str
    endcap_perm: Tuple[int, ...]
    rod_perm: Tuple[int, ...]
    tendon_perm: Tuple[int, ...]

    @property
    def is_flip(self) -> bool:
        return self.label in FLIP_LABELS

    def key(self) -> Tuple[Tuple[int, ...], Tuple[int, ...], Tuple[int, ...]]:
        return (self.endcap_perm, self.rod_perm, self.tendon_perm)


def match_points(transformed: np.ndarray, reference: np.ndarray,
                 tolerance: float = MATCH_TOLERANCE) -> Tuple[int, ...]:
    """Match each transformed point to its unique nearest reference point"""
    tree = cKDTree(reference)
    distances, indices = tree.query(transformed, k=1)
    if np.any(distances > tolerance):
        worst = int(np.argmax(distances))
        raise GeometryMismatch(
            f"endcap {worst} maps {distances[worst]:.3e} m from any canonical endcap "
            f"(tolerance {tolerance:.0e})")
    perm = tuple(int(i) for i in indices)
    if len(set(perm)) != len(perm):
        raise GeometryMismatch(f"transformed endcaps do not match uniquely: {perm}")
    return perm


def induce_edge_perm(edges: Sequence[Edge], endcap_perm: Sequence[int]) -> Tuple[int, ...]:
    """Permutation of an edge list induced by an endcap permutation"""
    lookup = {frozenset(edge): index for index, edge in enumerate(edges)}
    perm = []
    for a, b in edges:
        image = frozenset((endcap_perm[a], endcap_perm[b]))
        if image not in lookup:
            raise GeometryMismatch(
                f"edge ({a},{b}) maps to ({endcap_perm[a]},{endcap_perm[b]}), which is not an edge")
        perm.append(lookup[image])
    return tuple(perm)


def compose_perm(p: Sequence[int], q: Sequence[int]) -> Tuple[int, ...]:
    """(p o q)[i] = p[q[i]]: apply q first, then p"""
    return tuple(p[i] for i in q)


def invert_perm(p: Sequence[int]) -> Tuple[int, ...]:
    inverse = [0] * len(p)
    for i, image in enumerate(p):
        inverse[image] = i
    return tuple(inverse)


def act_on_rows(values: np.ndarray, perm: Sequence[int], axis: int = 0) -> np.ndarray:
    """Carry row i of values to row perm[i] along the given axis"""
    moved = np.moveaxis(np.asarray(values), axis, 0)
    out = np.empty_like(moved)
    out[list(perm)] = moved
    return np.moveaxis(out, 0, axis)


def _flip_transform(topology: TensegrityTopology) -> Rotation:
    # half-turn about the horizontal axis through rod 0's centre
    pos = topology.endcap_positions
    a, b = topology.rods[0]
    centre = 0.5 * (pos[a] + pos[b])
    horizontal = centre - np.dot(centre, topology.rod_axis) * topology.rod_axis
    norm = np.linalg.norm(horizontal)
    if norm < 1e-9:
        raise GeometryMismatch("rod 0 centre lies on rod_axis; flip axis undefined")
    return Rotation.from_rotvec(np.pi * horizontal / norm)


class D3Group:
    """The six validated symmetry elements with their group algebra"""

    def __init__(self, elements: Sequence[GroupElement]):
        self.elements: Tuple[GroupElement, ...] = tuple(elements)
        self._by_key = {g.key(): g for g in self.elements}
        self._by_label = {g.label: g for g in self.elements}

    def __iter__(self) -> Iterator[GroupElement]:
        return iter(self.elements)

    def __len__(self) -> int:
        return len(self.elements)

    def __getitem__(self, index: int) -> GroupElement:
        return self.elements[index]

    def __repr__(self) -> str:
        return f"D3Group({[g.label for g in self.elements]})"

    def by_label(self, label: str) -> GroupElement:
        return self._by_label[label]

    @property
    def identity(self) -> GroupElement:
        return self._by_label["e"]

    def compose(self, g: GroupElement, h: GroupElement) -> GroupElement:
        key = (compose_perm(g.endcap_perm, h.endcap_perm),
               compose_perm(g.rod_perm, h.rod_perm),
               compose_perm(g.tendon_perm, h.tendon_perm))
        result = self._by_key.get(key)
        if result is None:
            raise ClosureViolation(f"{g.label}*{h.label} matches no stored element")
        return result

    def inverse(self, g: GroupElement) -> GroupElement:
        for h in self.elements:
            if self.compose(g, h).label == "e":
                return h
        raise ClosureViolation(f"{g.label} has no inverse in the group")

    def subgroup(self, labels: Sequence[str]) -> "D3Group":
        """Restrict to the named elements (used to disable symmetrization with ['e'])"""
        return D3Group([self._by_label[label] for label in labels])

    def composition_table(self) -> List[List[str]]:
        return [[self.compose(g, h).label for h in self.elements] for g in self.elements]

    def check_axioms(self) -> List[str]:
        """Return a description of every violated group axiom (empty when valid)"""
        failures = []
        if len(self.elements) != 6:
            failures.append(f"expected 6 elements, got {len(self.elements)}")
        if len(self._by_key) != len(self.elements):
            failures.append("elements are not distinct")

        try:
            table = self.composition_table()
        except ClosureViolation as e:
            return failures + [f"closure: {e}"]

        labels = [g.label for g in self.elements]
        for row_label, row in zip(labels, table):
            if sorted(row) != sorted(labels):
                failures.append(f"row {row_label} is not a permutation of the elements")
        for j, column_label in enumerate(labels):
            column = [row[j] for row in table]
            if sorted(column) != sorted(labels):
                failures.append(f"column {column_label} is not a permutation of the elements")

        e = self._by_label.get("e")
        if e is None or any(e.endcap_perm[i] != i for i in range(len(e.endcap_perm))):
            failures.append("identity element missing or not the identity permutation")
            return failures

        for g in self.elements:
            if self.compose(e, g) is not g or self.compose(g, e) is not g:
                failures.append(f"identity law fails for {g.label}")
            if self.compose(g, self.inverse(g)) is not e:
                failures.append(f"inverse law fails for {g.label}")

        for g in self.elements:
            for h in self.elements:
                for k in self.elements:
                    if self.compose(self.compose(g, h), k) is not self.compose(g, self.compose(h, k)):
                        failures.append(f"associativity fails for ({g.label},{h.label},{k.label})")

        r, f = self._by_label.get("r"), self._by_label.get("f")
        if r is not None and f is not None:
            if self.compose(r, self.compose(r, r)) is not e:
                failures.append("r^3 != e")
            if self.compose(f, f) is not e:
                failures.append("f^2 != e")
            if self.compose(f, self.compose(r, f)) is not self._by_label.get("r2"):
                failures.append("f r f != r2")
        return failures


def build_d3_group(topology: TensegrityTopology) -> D3Group:
    """Derive the six D3 elements from the rigid symmetries of the prism geometry"""
    rotation = Rotation.from_rotvec(2.0 * np.pi / 3.0 * topology.rod_axis)
    flip = _flip_transform(topology)
    identity = Rotation.identity()
    transforms = {
        "e": identity,
        "r": rotation,
        "r2": rotation * rotation,
        "f": flip,
        "fr": flip * rotation,
        "fr2": flip * rotation * rotation,
    }

    elements = []
    for label in GROUP_LABELS:
        moved = transforms[label].apply(topology.endcap_positions)
        endcap_perm = match_points(moved, topology.endcap_positions)
        elements.append(GroupElement(
            label=label,
            endcap_perm=endcap_perm,
            rod_perm=induce_edge_perm(topology.rods, endcap_perm),
            tendon_perm=induce_edge_perm(topology.tendons, endcap_perm),
        ))
        logger.debug(f"Group element {label}: endcaps {endcap_perm}")

    group = D3Group(elements)
    failures = group.check_axioms()
    if failures:
        raise ClosureViolation("; ".join(failures))
    logger.info("Built D3 symmetry group of the canonical prism")
    return group


@lru_cache(maxsize=1)
def canonical_group() -> D3Group:
    return build_d3_group(build_canonical_topology())


def compose(g: GroupElement, h: GroupElement, group: Optional[D3Group] = None) -> GroupElement:
    return (group or canonical_group()).compose(g, h)


def inverse(g: GroupElement, group: Optional[D3Group] = None) -> GroupElement:
    return (group or canonical_group()).inverse(g)
