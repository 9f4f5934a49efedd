"""Levenberg-Marquardt minimization of factor-graph costs.

Translation graphs use closed-form first and second derivatives of the
robustified range/smoothness/relative-translation costs, assembled into a
block-tridiagonal approximate Hessian when the graph is a chain (range
factors touch one node, smoothness factors touch consecutive nodes). The
damped system (B + lambda I) dx = -grad is then solved by a banded Cholesky
factorization; non-chain graphs fall back to a dense solve.

Pose graphs are optimized over the global log coordinates of each pose
(6-vectors, rotation part first): residual Jacobians are obtained by
central differences, the gradient follows the exact robust chain rule, and
the Hessian uses the positive-semidefinite Gauss-Newton form. This global
parameterization degrades near rotation angles of pi; callers should
re-anchor before that.

The exact translation Hessian can be indefinite away from a minimum (the
range term carries the residual-curvature part); the damping factor
restores positive definiteness, and a pure Gauss-Newton variant is
available through LmConfig.hessian for extra robustness.
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np
import scipy.linalg

from . import liegroup
from .errors import GraphError, RangelocError, SingularGeometryWarning
from .factors import (
    PoseSmoothnessFactor,
    RangeFactor,
    RelRotationFactor,
    RelTransformFactor,
    RelTranslationFactor,
    SINGULAR_RANGE_NORM,
    pose_smoothness_residual,
    rel_rotation_residual,
    rel_transform_residual,
    rel_translation_residual,
)
from .graph import Edge, FactorGraph

LAMBDA_MIN = 1e-12
LAMBDA_MAX = 1e12

_EYE3 = np.eye(3)


@dataclass(frozen=True)
class LmConfig:
    """Levenberg-Marquardt knobs.

    Defaults follow the real-time setup used throughout: 10 iterations on a
    10-state window, lambda starting at 1e-3, scaled up by 10 on a rejected
    step and down by 0.3 on an accepted one, clamped to [1e-12, 1e12].
    """

    max_iterations: int = 10
    cost_threshold: float = 1e-10
    lambda_init: float = 1e-3
    lambda_up: float = 10.0
    lambda_down: float = 0.3
    min_step_norm: float = 1e-10
    hessian: str = "analytic"  # or "gauss-newton"

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be positive")
        if self.lambda_init <= 0.0 or self.lambda_up <= 1.0 or not 0.0 < self.lambda_down < 1.0:
            raise ValueError("need lambda_init > 0, lambda_up > 1, 0 < lambda_down < 1")
        if self.hessian not in ("analytic", "gauss-newton"):
            raise ValueError(f"unknown hessian kind {self.hessian!r}")


@dataclass
class SolveReport:
    iterations: int
    initial_cost: float
    final_cost: float
    grad_norm: float
    lambdas: list[float]
    converged: bool
    wall_time_s: float
    accepted_steps: int = 0
    timings: dict = field(default_factory=dict)


class BlockTridiagonal:
    """Symmetric block-tridiagonal matrix: diagonal blocks D_i and upper
    off-diagonal blocks U_i coupling nodes i and i+1."""

    def __init__(self, n_blocks: int, block: int):
        self.n_blocks = n_blocks
        self.block = block
        self.diag = np.zeros((n_blocks, block, block))
        self.off = np.zeros((max(n_blocks - 1, 0), block, block))

    @property
    def dim(self) -> int:
        return self.n_blocks * self.block

    def structural_nnz(self) -> int:
        """Scalar entries stored: b^2 * (3 n - 2)."""
        return self.block * self.block * (3 * self.n_blocks - 2)

    def to_dense(self) -> np.ndarray:
        b = self.block
        H = np.zeros((self.dim, self.dim))
        for i in range(self.n_blocks):
            H[b * i : b * i + b, b * i : b * i + b] = self.diag[i]
        for i in range(self.n_blocks - 1):
            H[b * i : b * i + b, b * (i + 1) : b * (i + 1) + b] = self.off[i]
            H[b * (i + 1) : b * (i + 1) + b, b * i : b * i + b] = self.off[i].T
        return H

    def matvec(self, v: np.ndarray) -> np.ndarray:
        b = self.block
        x = v.reshape(self.n_blocks, b)
        y = np.einsum("nij,nj->ni", self.diag, x)
        if self.n_blocks > 1:
            y[:-1] += np.einsum("nij,nj->ni", self.off, x[1:])
            y[1:] += np.einsum("nji,nj->ni", self.off, x[:-1])
        return y.reshape(-1)

    def banded_upper(self, lam: float) -> np.ndarray:
        """LAPACK upper-banded storage of (self + lam I)."""
        b = self.block
        u = 2 * b - 1
        ab = np.zeros((u + 1, self.dim))
        for r in range(b):
            for c in range(r, b):
                ab[u + r - c, c::b] = self.diag[:, r, c]
        if self.n_blocks > 1:
            for r in range(b):
                for c in range(b):
                    ab[u + r - b - c, b + c :: b] = self.off[:, r, c]
        ab[u, :] += lam
        return ab


HessianApprox = Union[BlockTridiagonal, np.ndarray]


# ---------------------------------------------------------------------------
# Translation-mode analytic derivatives
# ---------------------------------------------------------------------------


def _range_terms(g, x: np.ndarray):
    """Shared per-range quantities; masks out robot-at-anchor factors."""
    diff = x[g.range_pos] - g.range_anchor
    dist = np.linalg.norm(diff, axis=1)
    ok = dist >= SINGULAR_RANGE_NORM
    if not ok.all():
        warnings.warn(
            f"skipping {int((~ok).sum())} range factor(s) with robot at anchor",
            SingularGeometryWarning,
        )
    safe = np.where(ok, dist, 1.0)
    m = g.range_d - dist
    q = 1.0 + (m / g.range_xi) ** 2
    y = m / np.sqrt(q)
    grad_h = diff / safe[:, None]
    return ok, safe, q, y, grad_h


def _z_vec(delta: np.ndarray, xi: np.ndarray) -> np.ndarray:
    """z(delta) = delta / sqrt(1 + |delta|^2 / xi^2)."""
    n2 = np.einsum("ni,ni->n", delta, delta)
    return delta / np.sqrt(1.0 + n2 / xi**2)[:, None]


def _x_mat(delta: np.ndarray, xi: np.ndarray) -> np.ndarray:
    """Second derivative of rho(|delta|): ((xi^2+|d|^2) I - d d^T) scaled."""
    n2 = np.einsum("ni,ni->n", delta, delta)
    xi2 = xi**2
    denom = xi2 * (1.0 + n2 / xi2) ** 1.5
    outer = np.einsum("ni,nj->nij", delta, delta)
    return ((xi2 + n2)[:, None, None] * _EYE3 - outer) / denom[:, None, None]


def assemble_gradient(graph: FactorGraph, x: np.ndarray) -> np.ndarray:
    """Exact gradient of the translation-mode cost, shape (3 N,).

    Range factors contribute -w_r y grad_h on their node; each smoothness
    factor contributes +/- w_s z(delta) on its two endpoints, the anchored
    (boundary) one only on its single node.
    """
    x = graph._check_state(x)
    if graph.mode != "translation":
        raise GraphError("analytic gradient is defined for translation graphs")
    g = graph.groups()
    out = np.zeros_like(x)
    if g.range_pos.size:
        ok, _, _, y, grad_h = _range_terms(g, x)
        contrib = -(g.range_w * y * ok)[:, None] * grad_h
        np.add.at(out, g.range_pos, contrib)
    if g.sm_curr.size:
        z = _z_vec(x[g.sm_curr] - x[g.sm_prev], g.sm_xi) * g.sm_w[:, None]
        np.add.at(out, g.sm_curr, z)
        np.add.at(out, g.sm_prev, -z)
    if g.an_curr.size:
        z = _z_vec(x[g.an_curr] - g.an_ref, g.an_xi) * g.an_w[:, None]
        np.add.at(out, g.an_curr, z)
    for edge in g.rel_edges:
        f = edge.factor
        i, j = (graph.position(n) for n in edge.nodes)
        e = rel_translation_residual(x[i], x[j], f)
        We = f.W @ e
        phi = 1.0 / math.sqrt(1.0 + float(e @ We) / f.xi**2)
        out[i] -= phi * We
        out[j] += phi * We
    return out.reshape(-1)


def _rel_translation_hessian(f: RelTranslationFactor, e: np.ndarray) -> np.ndarray:
    We = f.W @ e
    s2 = 1.0 + float(e @ We) / f.xi**2
    return f.W / math.sqrt(s2) - np.outer(We, We) / (f.xi**2 * s2**1.5)


def assemble_hessian(
    graph: FactorGraph, x: np.ndarray, kind: str = "analytic"
) -> HessianApprox:
    """Second derivative of the translation-mode cost.

    Returns a BlockTridiagonal for chain graphs, a dense symmetric ndarray
    otherwise. kind="gauss-newton" keeps only the positive-semidefinite
    range term w_r l grad_h grad_h^T (the smoothness curvature is PSD
    already and is kept exact).
    """
    x = graph._check_state(x)
    if graph.mode != "translation":
        raise GraphError("analytic hessian is defined for translation graphs")
    g = graph.groups()
    n = graph.n_nodes
    chain = graph.is_chain()
    H = BlockTridiagonal(n, 3) if chain else np.zeros((3 * n, 3 * n))

    def add_diag(pos, blocks):
        if chain:
            np.add.at(H.diag, pos, blocks)
        else:
            for p, blk in zip(pos, blocks):
                H[3 * p : 3 * p + 3, 3 * p : 3 * p + 3] += blk

    def add_pair(pi, pj, blk):
        # blk couples node pi (row) with node pj (col); both minus-signed
        # off-diagonal contributions of a difference term.
        if chain:
            lo, hi = (pi, pj) if pi < pj else (pj, pi)
            H.off[lo] -= blk if pi < pj else blk.T
        else:
            H[3 * pi : 3 * pi + 3, 3 * pj : 3 * pj + 3] -= blk
            H[3 * pj : 3 * pj + 3, 3 * pi : 3 * pi + 3] -= blk.T

    if g.range_pos.size:
        ok, safe, q, y, grad_h = _range_terms(g, x)
        l = q**-1.5
        outer = np.einsum("ni,nj->nij", grad_h, grad_h)
        blocks = l[:, None, None] * outer
        if kind == "analytic":
            blocks = blocks - (y / safe)[:, None, None] * (_EYE3 - outer)
        blocks = (g.range_w * ok)[:, None, None] * blocks
        add_diag(g.range_pos, blocks)
    if g.sm_curr.size:
        M = _x_mat(x[g.sm_curr] - x[g.sm_prev], g.sm_xi) * g.sm_w[:, None, None]
        add_diag(g.sm_curr, M)
        add_diag(g.sm_prev, M)
        for k in range(len(g.sm_curr)):
            add_pair(int(g.sm_prev[k]), int(g.sm_curr[k]), M[k])
    if g.an_curr.size:
        M = _x_mat(x[g.an_curr] - g.an_ref, g.an_xi) * g.an_w[:, None, None]
        add_diag(g.an_curr, M)
    for edge in g.rel_edges:
        f = edge.factor
        i, j = (graph.position(n) for n in edge.nodes)
        e = rel_translation_residual(x[i], x[j], f)
        if kind == "analytic":
            D = _rel_translation_hessian(f, e)
        else:
            We = f.W @ e
            D = f.W / math.sqrt(1.0 + float(e @ We) / f.xi**2)
        add_diag([i, j], [D, D])
        add_pair(i, j, D)
    return H


# ---------------------------------------------------------------------------
# Damped linear solve
# ---------------------------------------------------------------------------


def sparse_solve(B: HessianApprox, lam: float, rhs: np.ndarray) -> np.ndarray:
    """Solve (B + lam I) delta = rhs.

    Block-tridiagonal systems go through the banded Cholesky factorization
    (LAPACK pbsv); dense fallbacks use a dense Cholesky. Raises
    scipy.linalg.LinAlgError when the damped matrix is not positive
    definite, in which case the caller should increase lam and retry.
    """
    if isinstance(B, BlockTridiagonal):
        ab = B.banded_upper(lam)
        return scipy.linalg.solveh_banded(ab, rhs, lower=False)
    H = B + lam * np.eye(B.shape[0])
    c, low = scipy.linalg.cho_factor(H)
    return scipy.linalg.cho_solve((c, low), rhs)


def damped_newton_step(
    graph: FactorGraph, x: np.ndarray, lam: float, kind: str = "analytic"
) -> tuple[np.ndarray, HessianApprox, np.ndarray]:
    """One unconditional damped step x - (B + lam I)^-1 grad.

    This is the single-iteration update the stability analysis reasons
    about: no step acceptance test, fixed lambda. Returns the new state,
    the Hessian approximation, and the gradient at the input state.
    """
    grad = assemble_gradient(graph, x)
    B = assemble_hessian(graph, x, kind)
    delta = sparse_solve(B, lam, -grad)
    return np.asarray(x, dtype=float) + delta.reshape(np.shape(x)), B, grad


# ---------------------------------------------------------------------------
# LM driver
# ---------------------------------------------------------------------------


def _lm_loop(
    cost_fn: Callable[[np.ndarray], float],
    derivs_fn: Callable[[np.ndarray], tuple[np.ndarray, HessianApprox]],
    x0: np.ndarray,
    cfg: LmConfig,
) -> tuple[np.ndarray, SolveReport]:
    t_start = time.perf_counter()
    timings = {"assembly_s": 0.0, "linear_solve_s": 0.0, "cost_eval_s": 0.0}
    x = np.array(x0, dtype=float)
    cost = cost_fn(x)
    report = SolveReport(
        iterations=0,
        initial_cost=cost,
        final_cost=cost,
        grad_norm=math.nan,
        lambdas=[],
        converged=cost <= cfg.cost_threshold,
        wall_time_s=0.0,
        timings=timings,
    )
    if report.converged:
        report.wall_time_s = time.perf_counter() - t_start
        return x, report
    lam = cfg.lambda_init
    grad = None
    for _ in range(cfg.max_iterations):
        report.iterations += 1
        t0 = time.perf_counter()
        grad, B = derivs_fn(x)
        timings["assembly_s"] += time.perf_counter() - t0
        delta = None
        t0 = time.perf_counter()
        while lam <= LAMBDA_MAX:
            try:
                delta = sparse_solve(B, lam, -grad)
                break
            except scipy.linalg.LinAlgError:
                lam = lam * cfg.lambda_up
        timings["linear_solve_s"] += time.perf_counter() - t0
        report.lambdas.append(lam)
        if delta is None:
            break
        x_new = x + delta
        t0 = time.perf_counter()
        new_cost = cost_fn(x_new)
        timings["cost_eval_s"] += time.perf_counter() - t0
        if new_cost <= cost:
            x, cost = x_new, new_cost
            report.accepted_steps += 1
            lam = max(lam * cfg.lambda_down, LAMBDA_MIN)
            step = float(np.linalg.norm(delta))
            if cost <= cfg.cost_threshold or step < cfg.min_step_norm:
                report.converged = True
                break
        else:
            lam = min(lam * cfg.lambda_up, LAMBDA_MAX)
    report.final_cost = cost
    report.grad_norm = float(np.linalg.norm(grad)) if grad is not None else math.nan
    report.wall_time_s = time.perf_counter() - t_start
    return x, report


def lm_minimize(
    graph: FactorGraph, x0: np.ndarray, cfg: LmConfig = LmConfig()
) -> tuple[np.ndarray, SolveReport]:
    """Minimize a translation graph cost from x0 of shape (N, 3).

    Accepted steps never increase the cost; rejected steps raise lambda and
    retry. Terminates on the iteration budget, the cost threshold, or an
    accepted step shorter than min_step_norm.
    """
    x0 = graph._check_state(x0)

    def derivs(x_flat: np.ndarray):
        x = x_flat.reshape(-1, 3)
        return assemble_gradient(graph, x), assemble_hessian(graph, x, cfg.hessian)

    x_flat, report = _lm_loop(
        lambda x: graph.total_cost(x.reshape(-1, 3)), derivs, x0.reshape(-1), cfg
    )
    return x_flat.reshape(-1, 3), report


# ---------------------------------------------------------------------------
# Pose mode (global log coordinates)
# ---------------------------------------------------------------------------

_FD_STEP = 1e-6


def _pose_edge_residual(edge: Edge, graph: FactorGraph, poses: list[np.ndarray]):
    """Residual vector and touched node positions for one pose-graph edge."""
    f = edge.factor
    pos = [graph.position(n) for n in edge.nodes]
    if isinstance(f, RangeFactor):
        t = liegroup.translation_of(poses[pos[0]])
        diff = t - f.anchor
        dist = math.sqrt(float(diff @ diff))
        if dist < SINGULAR_RANGE_NORM:
            return None, pos
        return np.array([f.d - dist]), pos
    if isinstance(f, PoseSmoothnessFactor):
        if edge.fixed_ref is not None:
            return pose_smoothness_residual(poses[pos[0]], edge.fixed_ref, f), pos
        return pose_smoothness_residual(poses[pos[1]], poses[pos[0]], f), pos
    if isinstance(f, RelTranslationFactor):
        i, j = pos
        return (
            rel_translation_residual(
                liegroup.translation_of(poses[i]), liegroup.translation_of(poses[j]), f
            ),
            pos,
        )
    if isinstance(f, RelRotationFactor):
        i, j = pos
        return rel_rotation_residual(liegroup.rotation_of(poses[i]), liegroup.rotation_of(poses[j]), f), pos
    if isinstance(f, RelTransformFactor):
        i, j = pos
        return rel_transform_residual(poses[i], poses[j], f), pos
    raise GraphError(f"factor {type(f).__name__} not valid in pose mode")


def _perturbations(base: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(12, 6) array of +/- central-difference points and the 6 step sizes."""
    h = _FD_STEP * np.maximum(1.0, np.abs(base))
    pert = np.repeat(base[None, :], 12, axis=0)
    idx = np.arange(6)
    pert[2 * idx, idx] += h
    pert[2 * idx + 1, idx] -= h
    return pert, h


def _central_diff(res_pert: np.ndarray, h: np.ndarray) -> np.ndarray:
    """Jacobian (m, 6) from residuals at the 12 perturbation points."""
    return ((res_pert[0::2] - res_pert[1::2]) / (2.0 * h)[:, None]).T


def _batch_perturbations(base: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(S, 12, 6) central-difference points for (S, 6) bases, plus steps."""
    h = _FD_STEP * np.maximum(1.0, np.abs(base))
    pert = np.repeat(base[:, None, :], 12, axis=1)
    idx = np.arange(6)
    pert[:, 2 * idx, idx] += h
    pert[:, 2 * idx + 1, idx] -= h
    return pert, h


def _pose_derivs(graph: FactorGraph, eps: np.ndarray):
    """Gradient and Gauss-Newton Hessian of the pose cost at eps (N, 6).

    Residual Jacobians with respect to the global log coordinates come from
    central differences (batched over factors and perturbation points); the
    gradient then follows the exact chain rule of the robust losses, so it
    is consistent with the evaluated cost up to finite-difference error.
    """
    n = graph.n_nodes
    g = graph.pose_groups()
    poses = liegroup._exp_se3_batch(eps)
    chain = graph.is_chain()
    H = BlockTridiagonal(n, 6) if chain else np.zeros((6 * n, 6 * n))
    grad = np.zeros((n, 6))

    def add_block(pi, pj, blk):
        if pi == pj:
            if chain:
                H.diag[pi] += blk
            else:
                H[6 * pi : 6 * pi + 6, 6 * pi : 6 * pi + 6] += blk
        elif chain:
            lo = min(pi, pj)
            H.off[lo] += blk if pi < pj else blk.T
        else:
            H[6 * pi : 6 * pi + 6, 6 * pj : 6 * pj + 6] += blk
            H[6 * pj : 6 * pj + 6, 6 * pi : 6 * pi + 6] += blk.T

    if g.range_pos.size:
        t = poses[g.range_pos][:, :3, 3]
        diff = t - g.range_anchor
        dist = np.linalg.norm(diff, axis=1)
        ok = dist >= SINGULAR_RANGE_NORM
        if not ok.all():
            warnings.warn(
                f"skipping {int((~ok).sum())} range factor(s) with robot at anchor",
                SingularGeometryWarning,
            )
        gh = diff / np.where(ok, dist, 1.0)[:, None]
        omega = eps[g.range_pos, :3]
        u = eps[g.range_pos, 3:]
        hw = _FD_STEP * np.maximum(1.0, np.abs(omega))
        pert = np.repeat(omega[:, None, :], 6, axis=1)
        idx = np.arange(3)
        pert[:, 2 * idx, idx] += hw
        pert[:, 2 * idx + 1, idx] -= hw
        V_pert = liegroup._left_jacobian_batch(pert.reshape(-1, 3)).reshape(-1, 6, 3, 3)
        t_pert = np.einsum("rcij,rj->rci", V_pert, u)
        Jtw = (t_pert[:, 0::2] - t_pert[:, 1::2]) / (2.0 * hw)[:, :, None]  # (R, 3 coord, 3 t)
        J = np.empty((len(dist), 6))
        J[:, :3] = -np.einsum("ri,rci->rc", gh, Jtw)
        J[:, 3:] = -np.einsum("ri,rij->rj", gh, liegroup._left_jacobian_batch(omega))
        e = g.range_d - dist
        q = 1.0 + (e / g.range_xi) ** 2
        wy = g.range_w * ok * e / np.sqrt(q)
        wl = g.range_w * ok * q**-1.5
        np.add.at(grad, g.range_pos, wy[:, None] * J)
        blocks = wl[:, None, None] * np.einsum("ri,rj->rij", J, J)
        if chain:
            np.add.at(H.diag, g.range_pos, blocks)
        else:
            for p, blk in zip(g.range_pos, blocks):
                add_block(int(p), int(p), blk)

    if g.sm_curr.size:
        has_prev = g.sm_prev >= 0
        P_prev = np.where(
            has_prev[:, None, None], poses[np.maximum(g.sm_prev, 0)], g.sm_prev_fixed
        )
        P_curr = poses[g.sm_curr]
        A = g.sm_rel @ liegroup._inverse_batch(P_curr)
        res = liegroup._log_se3_batch(A @ P_prev)
        pert, h = _batch_perturbations(eps[g.sm_curr])
        s = len(g.sm_curr)
        P_pert = liegroup._exp_se3_batch(pert.reshape(-1, 6)).reshape(s, 12, 4, 4)
        M = g.sm_rel[:, None] @ liegroup._inverse_batch(P_pert) @ P_prev[:, None]
        r = liegroup._log_se3_batch(M)
        J_curr = ((r[:, 0::2] - r[:, 1::2]) / (2.0 * h)[:, :, None]).transpose(0, 2, 1)
        J_prev = np.zeros_like(J_curr)
        if has_prev.any():
            sel = np.flatnonzero(has_prev)
            pert_p, h_p = _batch_perturbations(eps[g.sm_prev[sel]])
            P_pert = liegroup._exp_se3_batch(pert_p.reshape(-1, 6)).reshape(len(sel), 12, 4, 4)
            r = liegroup._log_se3_batch(A[sel][:, None] @ P_pert)
            J_prev[sel] = ((r[:, 0::2] - r[:, 1::2]) / (2.0 * h_p)[:, :, None]).transpose(0, 2, 1)
        We = np.einsum("sij,sj->si", g.sm_W, res)
        phi = 1.0 / np.sqrt(1.0 + np.einsum("si,si->s", res, We) / g.sm_xi**2)
        phiWe = phi[:, None] * We
        np.add.at(grad, g.sm_curr, np.einsum("sji,sj->si", J_curr, phiWe))
        diag_blocks = phi[:, None, None] * np.einsum("ski,skl,slj->sij", J_curr, g.sm_W, J_curr)
        if chain:
            np.add.at(H.diag, g.sm_curr, diag_blocks)
        else:
            for p, blk in zip(g.sm_curr, diag_blocks):
                add_block(int(p), int(p), blk)
        if has_prev.any():
            sel = np.flatnonzero(has_prev)
            np.add.at(grad, g.sm_prev[sel], np.einsum("sji,sj->si", J_prev[sel], phiWe[sel]))
            prev_diag = phi[sel, None, None] * np.einsum(
                "ski,skl,slj->sij", J_prev[sel], g.sm_W[sel], J_prev[sel]
            )
            cross = phi[sel, None, None] * np.einsum(
                "ski,skl,slj->sij", J_prev[sel], g.sm_W[sel], J_curr[sel]
            )
            for k, idx_s in enumerate(sel):
                pi, pj = int(g.sm_prev[idx_s]), int(g.sm_curr[idx_s])
                add_block(pi, pi, prev_diag[k])
                add_block(pi, pj, cross[k])

    pose_list = [P for P in poses]
    for edge in g.other_edges:
        f = edge.factor
        res, jpos = _pose_edge_residual(edge, graph, pose_list)
        jacs = []
        for p in jpos:
            pert, h = _perturbations(eps[p])
            res_pert = np.empty((12, res.size))
            for k in range(12):
                saved = pose_list[p]
                pose_list[p] = liegroup.exp_se3(pert[k])
                res_pert[k], _ = _pose_edge_residual(edge, graph, pose_list)
                pose_list[p] = saved
            jacs.append(_central_diff(res_pert, h))
        We = f.W @ res
        phi = 1.0 / math.sqrt(1.0 + float(res @ We) / f.xi**2)
        for a, p in enumerate(jpos):
            grad[p] += jacs[a].T @ (phi * We)
            add_block(p, p, phi * jacs[a].T @ f.W @ jacs[a])
        if len(jpos) == 2:
            add_block(jpos[0], jpos[1], phi * jacs[0].T @ f.W @ jacs[1])
    return grad.reshape(-1), H


def lm_minimize_pose(
    graph: FactorGraph, P0: np.ndarray, cfg: LmConfig = LmConfig()
) -> tuple[np.ndarray, SolveReport]:
    """Minimize a pose graph cost from P0 of shape (N, 4, 4).

    The window is mapped to log coordinates, minimized as a Euclidean
    problem, and mapped back. Raises when an input rotation is within 1e-3
    rad of the pi branch cut (re-anchor the window first).
    """
    P0 = graph._check_state(P0)
    eps0 = np.empty((graph.n_nodes, 6))
    for i, P in enumerate(P0):
        eps0[i] = liegroup.log_se3(P)
        if np.linalg.norm(eps0[i][:3]) > math.pi - 1e-3:
            raise RangelocError(
                "pose rotation too close to the pi branch cut; re-anchor the window"
            )

    def cost(e_flat: np.ndarray) -> float:
        return graph.total_cost(liegroup._exp_se3_batch(e_flat.reshape(-1, 6)))

    def derivs(e_flat: np.ndarray):
        return _pose_derivs(graph, e_flat.reshape(-1, 6))

    e_flat, report = _lm_loop(cost, derivs, eps0.reshape(-1), cfg)
    return liegroup._exp_se3_batch(e_flat.reshape(-1, 6)), report
