"""Factor graph container: ordered nodes, constraint edges, total cost.

A graph is either in ``translation`` mode (node states are 3-vectors) or
``pose`` mode (node states are 4x4 homogeneous matrices). State vectors are
stacked ndarrays of shape (N, 3) or (N, 4, 4) in node insertion order;
per-node extraction is plain index selection, never an explicit selector
matrix.

Smoothness-style factors may connect two nodes, or one node to a fixed
reference state (``fixed_ref``) that is not part of the optimized state;
that is how a sliding window anchors its first node to the previous,
already-frozen estimate.

Mutation is single-writer; cost evaluation over an unchanged graph is pure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from . import liegroup
from .errors import GraphError
from .factors import (
    PoseSmoothnessFactor,
    RangeFactor,
    RelRotationFactor,
    RelTransformFactor,
    RelTranslationFactor,
    SmoothnessFactor,
    mahalanobis_cost,
    pose_smoothness_residual,
    pseudo_huber,
    rel_rotation_residual,
    rel_transform_residual,
    rel_translation_residual,
)

Factor = Union[
    RangeFactor,
    SmoothnessFactor,
    RelTranslationFactor,
    RelRotationFactor,
    RelTransformFactor,
    PoseSmoothnessFactor,
]

@dataclass(frozen=True)
class Edge:
    """One constraint: a factor plus the node ids it touches.

    ``nodes`` is (i,) for unary factors and (i, j) for pairwise ones; for
    smoothness factors the convention is (previous, current). A pairwise
    smoothness factor collapses to (current,) plus ``fixed_ref`` when the
    previous state is frozen outside the graph.
    """

    factor: Factor
    nodes: tuple[int, ...]
    fixed_ref: Optional[np.ndarray] = None


class _PoseGroups:
    """Per-kind factor arrays for vectorized pose-graph evaluation.

    Smoothness entries with a frozen previous pose carry prev index -1 and
    the pose itself in ``prev_fixed``.
    """

    def __init__(self, graph: "FactorGraph"):
        pos = graph._position
        rng = [(pos[e.nodes[0]], e.factor) for e in graph.edges if isinstance(e.factor, RangeFactor)]
        self.range_pos = np.array([p for p, _ in rng], dtype=int)
        self.range_anchor = np.array([f.anchor for _, f in rng]).reshape(-1, 3)
        self.range_d = np.array([f.d for _, f in rng])
        self.range_w = np.array([f.w_r for _, f in rng])
        self.range_xi = np.array([f.xi for _, f in rng])

        sm = [e for e in graph.edges if isinstance(e.factor, PoseSmoothnessFactor)]
        s = len(sm)
        self.sm_curr = np.empty(s, dtype=int)
        self.sm_prev = np.empty(s, dtype=int)
        self.sm_prev_fixed = np.zeros((s, 4, 4))
        self.sm_rel = np.zeros((s, 4, 4))
        self.sm_W = np.zeros((s, 6, 6))
        self.sm_xi = np.empty(s)
        for k, e in enumerate(sm):
            f = e.factor
            if e.fixed_ref is not None:
                self.sm_curr[k] = pos[e.nodes[0]]
                self.sm_prev[k] = -1
                self.sm_prev_fixed[k] = e.fixed_ref
            else:
                self.sm_prev[k] = pos[e.nodes[0]]
                self.sm_curr[k] = pos[e.nodes[1]]
            self.sm_rel[k] = liegroup.make_pose(f.R_meas_prev.T @ f.R_meas_curr, np.zeros(3))
            self.sm_W[k] = f.W
            self.sm_xi[k] = f.xi
        self.other_edges = [
            e
            for e in graph.edges
            if not isinstance(e.factor, (RangeFactor, PoseSmoothnessFactor))
        ]


class _TranslationGroups:
    """Per-kind factor arrays for vectorized cost/derivative assembly."""

    def __init__(self, graph: "FactorGraph"):
        pos = graph._position
        rng = [(pos[e.nodes[0]], e.factor) for e in graph.edges if isinstance(e.factor, RangeFactor)]
        self.range_pos = np.array([p for p, _ in rng], dtype=int)
        self.range_anchor = np.array([f.anchor for _, f in rng]).reshape(-1, 3)
        self.range_d = np.array([f.d for _, f in rng])
        self.range_w = np.array([f.w_r for _, f in rng])
        self.range_xi = np.array([f.xi for _, f in rng])

        pair, anchored = [], []
        for e in graph.edges:
            if not isinstance(e.factor, SmoothnessFactor):
                continue
            if e.fixed_ref is not None:
                anchored.append((pos[e.nodes[0]], e))
            else:
                pair.append((pos[e.nodes[0]], pos[e.nodes[1]], e.factor))
        self.sm_prev = np.array([p for p, _, _ in pair], dtype=int)
        self.sm_curr = np.array([c for _, c, _ in pair], dtype=int)
        self.sm_w = np.array([f.w_s for _, _, f in pair])
        self.sm_xi = np.array([f.xi for _, _, f in pair])
        self.an_curr = np.array([p for p, _ in anchored], dtype=int)
        self.an_ref = np.array([e.fixed_ref for _, e in anchored]).reshape(-1, 3)
        self.an_w = np.array([e.factor.w_s for _, e in anchored])
        self.an_xi = np.array([e.factor.xi for _, e in anchored])

        self.rel_edges = [e for e in graph.edges if isinstance(e.factor, RelTranslationFactor)]


class FactorGraph:
    def __init__(self, mode: str = "translation"):
        if mode not in ("translation", "pose"):
            raise GraphError(f"unknown graph mode {mode!r}")
        self.mode = mode
        self.node_ids: list[int] = []
        self.timestamps: list[Optional[float]] = []
        self._position: dict[int, int] = {}
        self._initial: list[np.ndarray] = []
        self.edges: list[Edge] = []
        self._groups: Optional[_TranslationGroups] = None
        self._pose_groups: Optional[_PoseGroups] = None

    # -- construction -------------------------------------------------

    def add_node(self, node_id: int, initial, timestamp: Optional[float] = None) -> None:
        if node_id in self._position:
            raise GraphError(f"duplicate node id {node_id}")
        state = np.asarray(initial, dtype=float)
        expected = (3,) if self.mode == "translation" else (4, 4)
        if state.shape != expected:
            raise GraphError(f"node state shape {state.shape} != {expected}")
        self._position[node_id] = len(self.node_ids)
        self.node_ids.append(node_id)
        self.timestamps.append(timestamp)
        self._initial.append(state)
        self._groups = None
        self._pose_groups = None

    def add_factor(self, factor: Factor, *nodes: int, fixed_ref=None) -> None:
        for n in nodes:
            if n not in self._position:
                raise GraphError(f"edge references unknown node {n}")
        expected = 1 if isinstance(factor, RangeFactor) else 2
        if fixed_ref is not None:
            if not isinstance(factor, (SmoothnessFactor, PoseSmoothnessFactor)):
                raise GraphError("fixed_ref is only valid for smoothness factors")
            expected = 1
            fixed_ref = np.asarray(fixed_ref, dtype=float)
        if len(nodes) != expected:
            raise GraphError(f"{type(factor).__name__} takes {expected} node(s), got {len(nodes)}")
        pose_only = (RelRotationFactor, RelTransformFactor, PoseSmoothnessFactor)
        if self.mode == "translation" and isinstance(factor, pose_only):
            raise GraphError(f"{type(factor).__name__} requires a pose graph")
        if self.mode == "pose" and isinstance(factor, SmoothnessFactor):
            raise GraphError("translation smoothness factor in a pose graph")
        self.edges.append(Edge(factor, tuple(nodes), fixed_ref))
        self._groups = None
        self._pose_groups = None

    # -- access -------------------------------------------------------

    @property
    def n_nodes(self) -> int:
        return len(self.node_ids)

    @property
    def block_size(self) -> int:
        return 3 if self.mode == "translation" else 6

    @property
    def state_dim(self) -> int:
        """Dimension of the flattened optimization variable."""
        return self.block_size * self.n_nodes

    def position(self, node_id: int) -> int:
        return self._position[node_id]

    def initial_states(self) -> np.ndarray:
        return np.array(self._initial)

    def extract_state(self, x: np.ndarray, node_id: int) -> np.ndarray:
        if node_id not in self._position:
            raise GraphError(f"unknown node id {node_id}")
        return x[self._position[node_id]]

    def is_chain(self) -> bool:
        """True when every pairwise edge connects adjacent node positions."""
        pos = self._position
        return all(
            abs(pos[e.nodes[0]] - pos[e.nodes[1]]) == 1
            for e in self.edges
            if len(e.nodes) == 2
        )

    def groups(self) -> _TranslationGroups:
        if self.mode != "translation":
            raise GraphError("grouped arrays exist only for translation graphs")
        if self._groups is None:
            self._groups = _TranslationGroups(self)
        return self._groups

    def pose_groups(self) -> _PoseGroups:
        if self.mode != "pose":
            raise GraphError("pose groups exist only for pose graphs")
        if self._pose_groups is None:
            self._pose_groups = _PoseGroups(self)
        return self._pose_groups

    def _check_state(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        expected = (self.n_nodes, 3) if self.mode == "translation" else (self.n_nodes, 4, 4)
        if x.shape != expected:
            raise GraphError(f"state shape {x.shape} != {expected}")
        return x

    # -- cost ---------------------------------------------------------

    def total_cost(self, x: np.ndarray) -> float:
        x = self._check_state(x)
        if self.mode == "translation":
            return self._translation_cost(x)
        return self._pose_cost(x)

    def _translation_cost(self, x: np.ndarray) -> float:
        g = self.groups()
        total = 0.0
        if g.range_pos.size:
            dist = np.linalg.norm(x[g.range_pos] - g.range_anchor, axis=1)
            e = (g.range_d - dist) / g.range_xi
            total += float(np.sum(g.range_w * g.range_xi**2 * (np.sqrt(1.0 + e * e) - 1.0)))
        if g.sm_curr.size:
            e = np.linalg.norm(x[g.sm_curr] - x[g.sm_prev], axis=1) / g.sm_xi
            total += float(np.sum(g.sm_w * g.sm_xi**2 * (np.sqrt(1.0 + e * e) - 1.0)))
        if g.an_curr.size:
            e = np.linalg.norm(x[g.an_curr] - g.an_ref, axis=1) / g.an_xi
            total += float(np.sum(g.an_w * g.an_xi**2 * (np.sqrt(1.0 + e * e) - 1.0)))
        for edge in g.rel_edges:
            f = edge.factor
            i, j = (self._position[n] for n in edge.nodes)
            total += mahalanobis_cost(rel_translation_residual(x[i], x[j], f), f.W, f.xi)
        return total

    def _pose_cost(self, x: np.ndarray) -> float:
        g = self.pose_groups()
        total = 0.0
        if g.range_pos.size:
            dist = np.linalg.norm(x[g.range_pos][:, :3, 3] - g.range_anchor, axis=1)
            e = (g.range_d - dist) / g.range_xi
            total += float(np.sum(g.range_w * g.range_xi**2 * (np.sqrt(1.0 + e * e) - 1.0)))
        if g.sm_curr.size:
            prev = np.where(
                (g.sm_prev >= 0)[:, None, None],
                x[np.maximum(g.sm_prev, 0)],
                g.sm_prev_fixed,
            )
            M = g.sm_rel @ liegroup._inverse_batch(x[g.sm_curr]) @ prev
            r = liegroup._log_se3_batch(M)
            q = np.einsum("si,sij,sj->s", r, g.sm_W, r) / g.sm_xi**2
            total += float(np.sum(g.sm_xi**2 * (np.sqrt(1.0 + q) - 1.0)))
        for edge in g.other_edges:
            total += self._pose_edge_cost(edge, x)
        return total

    def _pose_edge_cost(self, edge: Edge, x: np.ndarray) -> float:
        f = edge.factor
        pos = self._position
        if isinstance(f, RangeFactor):
            t = liegroup.translation_of(x[pos[edge.nodes[0]]])
            diff = t - f.anchor
            e = f.d - math.sqrt(float(diff @ diff))
            value, _ = pseudo_huber(e, f.xi)
            return f.w_r * value
        if isinstance(f, PoseSmoothnessFactor):
            if edge.fixed_ref is not None:
                prev, curr = edge.fixed_ref, x[pos[edge.nodes[0]]]
            else:
                prev, curr = x[pos[edge.nodes[0]]], x[pos[edge.nodes[1]]]
            return mahalanobis_cost(pose_smoothness_residual(curr, prev, f), f.W, f.xi)
        i, j = (pos[n] for n in edge.nodes)
        if isinstance(f, RelTranslationFactor):
            e = rel_translation_residual(
                liegroup.translation_of(x[i]), liegroup.translation_of(x[j]), f
            )
        elif isinstance(f, RelRotationFactor):
            e = rel_rotation_residual(liegroup.rotation_of(x[i]), liegroup.rotation_of(x[j]), f)
        elif isinstance(f, RelTransformFactor):
            e = rel_transform_residual(x[i], x[j], f)
        else:
            raise GraphError(f"factor {type(f).__name__} not valid in pose mode")
        return mahalanobis_cost(e, f.W, f.xi)
