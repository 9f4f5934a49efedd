"""Online sliding-window estimator with outlier rejection.

The estimator ingests one range measurement at a time. The first N
measurements are buffered and solved jointly from a random initial guess
(bootstrap); afterwards each accepted measurement slides the window by one:
the oldest state is frozen and becomes the boundary reference of the first
in-window smoothness factor, a new range factor and smoothness factor are
attached, and the window is re-optimized. The newest translation is the
emitted estimate.

A measurement is rejected when its range disagrees with the latest estimate
by more than gamma * v_max / f. Rejections leave the estimate untouched and
bump a consecutive-rejection counter k_c (reset to 1 on acceptance); once
k_c exceeds gamma the estimator signals restart-required, clears its state
and re-enters bootstrap. gamma is deliberately one knob for both the gate
and the restart limit; separate overrides exist for callers that want to
split them.

Smoothness time intervals always come from the accepted-measurement
timestamps, so a rejection gap widens dt and softly de-weights the next
smoothness constraint; the nominal 1/f enters only the outlier gate.
"""

from __future__ import annotations

import itertools
import math
import warnings
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Optional

import numpy as np

from . import liegroup
from .errors import ConfigError, InsufficientGeometryWarning, StreamError
from .factors import (
    PoseSmoothnessFactor,
    RangeFactor,
    SmoothnessFactor,
    pose_smoothness_weight,
    range_variance,
    smoothness_variance,
    weight_from_variance,
)
from .graph import FactorGraph
from .solver import LmConfig, SolveReport, lm_minimize, lm_minimize_pose

MODE_RANGE_ONLY = "range-only"
MODE_FUSED = "range-orientation"

COPLANARITY_VOLUME_TOL = 1e-6


@dataclass(frozen=True)
class RangeMeasurement:
    timestamp: float
    anchor_id: int
    d: float


@dataclass(frozen=True)
class OrientationMeasurement:
    timestamp: float
    R: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "R", liegroup.require_rotation(self.R))


@dataclass(frozen=True)
class EstimatorConfig:
    window: int = 10
    v_max: float = 1.0
    eta: float = 0.2
    f: float = 32.46
    gamma: float = 3.0
    iota: float = 1.0
    xi: float = 1.0
    mode: str = MODE_RANGE_ONLY
    sigma_o: float = 0.0
    seed: int = 0
    lm: LmConfig = LmConfig()
    bootstrap_max_iterations: int = 50
    gamma_gate: Optional[float] = None
    gamma_restart: Optional[float] = None

    def __post_init__(self):
        if self.window < 1:
            raise ConfigError("window must be positive")
        if self.f <= 0.0 or self.v_max <= 0.0 or self.eta < 0.0:
            raise ConfigError("need f > 0, v_max > 0, eta >= 0")
        if self.gamma < 1.0:
            raise ConfigError("gamma must be >= 1")
        if self.mode not in (MODE_RANGE_ONLY, MODE_FUSED):
            raise ConfigError(f"unknown mode {self.mode!r}")

    @property
    def gate_threshold(self) -> float:
        return (self.gamma_gate if self.gamma_gate is not None else self.gamma) * self.v_max / self.f

    @property
    def restart_limit(self) -> float:
        return self.gamma_restart if self.gamma_restart is not None else self.gamma

    @property
    def w_r(self) -> float:
        return weight_from_variance(range_variance(self.eta), self.iota)

    def w_s(self, dt: float) -> float:
        return weight_from_variance(smoothness_variance(self.v_max, dt), self.iota)


STATUS_BUFFERING = "buffering"
STATUS_INITIALIZED = "initialized"
STATUS_ACCEPTED = "accepted"
STATUS_REJECTED = "rejected"
STATUS_RESTART = "restart_required"


@dataclass(frozen=True)
class Update:
    status: str
    timestamp: float
    estimate: Optional[np.ndarray] = None
    pose: Optional[np.ndarray] = None
    report: Optional[SolveReport] = None
    window_timestamps: Optional[np.ndarray] = None
    window_estimates: Optional[np.ndarray] = None
    window_poses: Optional[np.ndarray] = None


def is_outlier(t_hat: np.ndarray, anchor: np.ndarray, d: float, cfg: EstimatorConfig) -> bool:
    """Gate of the rejection rule: | ||t_hat - anchor|| - d | > gamma v_max / f.

    Strict inequality: a deviation exactly at the threshold is accepted.
    """
    predicted = float(np.linalg.norm(np.asarray(t_hat) - np.asarray(anchor)))
    return abs(predicted - d) > cfg.gate_threshold


def max_tetrahedron_volume(points: np.ndarray) -> float:
    """Largest tetrahedron volume over all 4-point subsets."""
    pts = np.asarray(points, dtype=float)
    if len(pts) < 4:
        return 0.0
    best = 0.0
    for a, b, c, d in itertools.combinations(range(len(pts)), 4):
        v = abs(np.linalg.det(np.stack([pts[b] - pts[a], pts[c] - pts[a], pts[d] - pts[a]]))) / 6.0
        best = max(best, v)
    return best


@dataclass
class _Node:
    timestamp: float
    anchor_id: int
    anchor: np.ndarray
    d: float
    dt_prev: Optional[float]  # None for the very first node of a run
    w_s_prev: Optional[float]
    estimate: Optional[np.ndarray] = None  # translation
    pose: Optional[np.ndarray] = None  # fused mode
    R_meas: Optional[np.ndarray] = None  # fused mode


@dataclass
class EstimatorState:
    """Window contents plus Algorithm-1 bookkeeping (exposed for inspection)."""

    nodes: deque = field(default_factory=deque)
    buffer: list = field(default_factory=list)
    prev_timestamp: Optional[float] = None
    prev_estimate: Optional[np.ndarray] = None
    prev_pose: Optional[np.ndarray] = None
    prev_R_meas: Optional[np.ndarray] = None
    k_c: int = 1
    initialized: bool = False
    last_input_timestamp: float = -math.inf
    rejection_count: int = 0
    restart_count: int = 0


Stepper = Callable[[FactorGraph, np.ndarray, LmConfig], tuple[np.ndarray, SolveReport]]


class SlidingWindowEstimator:
    """Range-only or range-orientation sliding-window estimator.

    ``anchors`` maps anchor id to its fixed position. A custom ``stepper``
    replaces the per-measurement window solve (the bootstrap solve always
    uses the full LM); diagnostics use this hook to run the single
    unconditional damped iteration that the convergence analysis assumes.

    One instance is strictly sequential; run independent instances for
    parallel streams.
    """

    def __init__(
        self,
        cfg: EstimatorConfig,
        anchors: dict[int, np.ndarray],
        stepper: Optional[Stepper] = None,
    ):
        self.cfg = cfg
        self.anchors = {int(k): np.asarray(v, dtype=float) for k, v in anchors.items()}
        self.state = EstimatorState()
        self._rng = np.random.default_rng(cfg.seed)
        self._stepper = stepper

    # -- public API ----------------------------------------------------

    def process_range(self, m: RangeMeasurement) -> Update:
        if self.cfg.mode != MODE_RANGE_ONLY:
            raise ConfigError("estimator is configured for range-orientation mode")
        return self._process(m, None)

    def process_range_orientation(self, m: RangeMeasurement, o: OrientationMeasurement) -> Update:
        if self.cfg.mode != MODE_FUSED:
            raise ConfigError("estimator is configured for range-only mode")
        return self._process(m, o)

    @property
    def latest_estimate(self) -> Optional[np.ndarray]:
        if not self.state.initialized or not self.state.nodes:
            return None
        return self.state.nodes[-1].estimate

    def window_graph(self) -> FactorGraph:
        """Graph of the current window (for diagnostics)."""
        return self._build_graph()

    # -- internals -----------------------------------------------------

    def _process(self, m: RangeMeasurement, o: Optional[OrientationMeasurement]) -> Update:
        st = self.state
        if m.timestamp <= st.last_input_timestamp:
            raise StreamError(
                f"out-of-order timestamp {m.timestamp} (last {st.last_input_timestamp})"
            )
        st.last_input_timestamp = m.timestamp
        if m.anchor_id not in self.anchors:
            raise StreamError(f"unknown anchor id {m.anchor_id}")
        if not st.initialized:
            return self._buffering(m, o)
        anchor = self.anchors[m.anchor_id]
        if is_outlier(self.latest_estimate, anchor, m.d, self.cfg):
            st.k_c += 1
            st.rejection_count += 1
            if st.k_c > self.cfg.restart_limit:
                self._reset()
                st.restart_count += 1
                return Update(STATUS_RESTART, m.timestamp)
            return Update(STATUS_REJECTED, m.timestamp)
        return self._accept(m, o)

    def _reset(self) -> None:
        st = self.state
        st.nodes.clear()
        st.buffer.clear()
        st.prev_timestamp = None
        st.prev_estimate = None
        st.prev_pose = None
        st.prev_R_meas = None
        st.k_c = 1
        st.initialized = False

    def _buffering(self, m: RangeMeasurement, o) -> Update:
        st = self.state
        st.buffer.append((m, o))
        if len(st.buffer) < self.cfg.window:
            return Update(STATUS_BUFFERING, m.timestamp)
        return self._bootstrap()

    def _make_node(self, m: RangeMeasurement, o, prev_timestamp: Optional[float]) -> _Node:
        dt = None if prev_timestamp is None else m.timestamp - prev_timestamp
        return _Node(
            timestamp=m.timestamp,
            anchor_id=m.anchor_id,
            anchor=self.anchors[m.anchor_id],
            d=m.d,
            dt_prev=dt,
            w_s_prev=None if dt is None else self.cfg.w_s(dt),
            R_meas=None if o is None else o.R,
        )

    def _bootstrap(self) -> Update:
        st = self.state
        self._check_buffer_geometry()
        prev_t = None
        for m, o in st.buffer:
            st.nodes.append(self._make_node(m, o, prev_t))
            prev_t = m.timestamp
        st.buffer.clear()
        guess = self._random_guess()
        for node in st.nodes:
            node.estimate = guess.copy()
        cfg = replace(self.cfg.lm, max_iterations=self.cfg.bootstrap_max_iterations)
        # Translations first, even in fused mode: the pose cost is invariant
        # to a global rotation, and a cold start far from the minimum lets
        # the optimizer drift the rotation gauge away from the sensor frame.
        # Solving ranges+smoothness first, then starting the pose solve at
        # (R_meas, t_hat), keeps the gauge pinned to the orientation sensor.
        g = self._build_graph(translation_only=True)
        x0 = np.array([n.estimate for n in st.nodes])
        x, report = lm_minimize(g, x0, cfg)
        for node, t in zip(st.nodes, x):
            node.estimate = np.asarray(t, dtype=float)
        if self.cfg.mode == MODE_FUSED:
            for node in st.nodes:
                node.pose = liegroup.make_pose(node.R_meas, node.estimate)
            report = self._solve(cfg)
        st.initialized = True
        st.k_c = 1
        return self._solved_update(STATUS_INITIALIZED, report)

    def _check_buffer_geometry(self) -> None:
        positions = {}
        for m, _ in self.state.buffer:
            positions[m.anchor_id] = self.anchors[m.anchor_id]
        pts = np.array(list(positions.values()))
        if len(pts) < 4 or max_tetrahedron_volume(pts) <= COPLANARITY_VOLUME_TOL:
            warnings.warn(
                "bootstrap buffer covers fewer than four non-coplanar anchors; "
                "the 3-D fix may be ambiguous",
                InsufficientGeometryWarning,
            )

    def _random_guess(self) -> np.ndarray:
        pts = np.array(list(self.anchors.values()))
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        return self._rng.uniform(lo, hi)

    def _accept(self, m: RangeMeasurement, o) -> Update:
        st = self.state
        dropped = st.nodes.popleft()
        st.prev_timestamp = dropped.timestamp
        st.prev_estimate = dropped.estimate
        st.prev_pose = dropped.pose
        st.prev_R_meas = dropped.R_meas
        node = self._make_node(m, o, st.nodes[-1].timestamp)
        node.estimate = st.nodes[-1].estimate.copy()
        if self.cfg.mode == MODE_FUSED:
            node.pose = liegroup.make_pose(node.R_meas, node.estimate)
        st.nodes.append(node)
        report = self._solve(self.cfg.lm)
        st.k_c = 1
        return self._solved_update(STATUS_ACCEPTED, report)

    def _build_graph(self, translation_only: bool = False) -> FactorGraph:
        st = self.state
        cfg = self.cfg
        fused = cfg.mode == MODE_FUSED and not translation_only
        g = FactorGraph("pose" if fused else "translation")
        W_o = weight_from_variance(cfg.sigma_o**2, cfg.iota) * np.eye(3)
        for i, node in enumerate(st.nodes):
            g.add_node(i, node.pose if fused else node.estimate, timestamp=node.timestamp)
            g.add_factor(RangeFactor(d=node.d, anchor=node.anchor, w_r=cfg.w_r, xi=cfg.xi), i)
            if i > 0:
                if fused:
                    prev_R = st.nodes[i - 1].R_meas
                    g.add_factor(
                        PoseSmoothnessFactor(
                            prev_R, node.R_meas, pose_smoothness_weight(W_o, node.w_s_prev), cfg.xi
                        ),
                        i - 1,
                        i,
                    )
                else:
                    g.add_factor(
                        SmoothnessFactor(node.w_s_prev, node.dt_prev, cfg.v_max, cfg.xi), i - 1, i
                    )
            elif node.dt_prev is not None:
                # boundary smoothness toward the frozen previous estimate
                first = st.nodes[0]
                if fused:
                    g.add_factor(
                        PoseSmoothnessFactor(
                            st.prev_R_meas,
                            first.R_meas,
                            pose_smoothness_weight(W_o, first.w_s_prev),
                            cfg.xi,
                        ),
                        0,
                        fixed_ref=st.prev_pose,
                    )
                else:
                    g.add_factor(
                        SmoothnessFactor(first.w_s_prev, first.dt_prev, cfg.v_max, cfg.xi),
                        0,
                        fixed_ref=st.prev_estimate,
                    )
        return g

    def _solve(self, lm_cfg: LmConfig) -> SolveReport:
        st = self.state
        g = self._build_graph()
        if self.cfg.mode == MODE_FUSED:
            P0 = np.array([n.pose for n in st.nodes])
            poses, report = lm_minimize_pose(g, P0, lm_cfg)
            for node, P in zip(st.nodes, poses):
                node.pose = P
                node.estimate = liegroup.translation_of(P).copy()
        else:
            x0 = np.array([n.estimate for n in st.nodes])
            if self._stepper is not None:
                x, report = self._stepper(g, x0, lm_cfg)
            else:
                x, report = lm_minimize(g, x0, lm_cfg)
            for node, t in zip(st.nodes, x):
                node.estimate = np.asarray(t, dtype=float)
        return report

    def _solved_update(self, status: str, report: SolveReport) -> Update:
        st = self.state
        newest = st.nodes[-1]
        return Update(
            status=status,
            timestamp=newest.timestamp,
            estimate=newest.estimate.copy(),
            pose=None if newest.pose is None else newest.pose.copy(),
            report=report,
            window_timestamps=np.array([n.timestamp for n in st.nodes]),
            window_estimates=np.array([n.estimate for n in st.nodes]),
            window_poses=(
                np.array([n.pose for n in st.nodes]) if self.cfg.mode == MODE_FUSED else None
            ),
        )


def synchronize(
    ranges: Iterable[RangeMeasurement],
    orientations: Iterable[OrientationMeasurement],
) -> list[tuple[RangeMeasurement, OrientationMeasurement]]:
    """Pair each range with the nearest-timestamp orientation sample.

    Equidistant candidates resolve to the earlier sample; orientation
    samples that pair with no range are dropped. Output rate equals the
    range rate.
    """
    rng_list = list(ranges)
    ori_list = list(orientations)
    if not ori_list:
        raise ConfigError("orientation stream is empty")
    for seq, name in ((rng_list, "range"), (ori_list, "orientation")):
        for a, b in zip(seq, seq[1:]):
            if b.timestamp <= a.timestamp:
                raise StreamError(f"{name} stream timestamps must be strictly increasing")
    out = []
    j = 0
    for m in rng_list:
        while (
            j + 1 < len(ori_list)
            and abs(ori_list[j + 1].timestamp - m.timestamp) < abs(ori_list[j].timestamp - m.timestamp)
        ):
            j += 1
        out.append((m, ori_list[j]))
    return out
