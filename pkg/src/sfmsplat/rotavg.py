"""Absolute rotations from relative ones.

Initialization chains relative rotations along a maximum spanning tree
(weighted by inlier counts). Refinement minimizes

    sum_ij  rho_GM(|| log(R_ij^T R_j R_i^T) ||^2 ; sigma)

starting with a few l1-style IRLS passes and then Geman-McClure IRLS with an
annealed scale. Each step solves a sparse normal system over right
perturbations ``R_i <- R_i exp(d_i)`` of every non-anchor camera.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from .errors import DisconnectedGraph
from .geomcore import RobustKernel, robust_loss, so3_exp, so3_left_jacobian_inv, so3_log


@dataclass
class RelativeRotation:
    i: int
    j: int
    R: np.ndarray  # R_ij = R_j R_i^T
    weight: float = 1.0  # inlier count, used only for the spanning tree


@dataclass
class RotationAveragingProblem:
    edges: list[RelativeRotation]
    sigma: float = np.radians(5.0)
    anchor: int | None = None
    final_sigma: float = np.radians(1.0)

    def __post_init__(self):
        if self.sigma <= 0 or self.final_sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.anchor is None and self.edges:
            self.anchor = min(min(e.i, e.j) for e in self.edges)

    @classmethod
    def from_view_graph(cls, graph, **kw) -> "RotationAveragingProblem":
        return cls([RelativeRotation(e.i, e.j, e.R, float(e.inlier_count)) for e in graph.edges], **kw)

    @property
    def vertices(self) -> list[int]:
        return sorted({v for e in self.edges for v in (e.i, e.j)})


@dataclass
class RotationTrace:
    """Per accepted iterate: phase label, GM scale (or nan in the l1 phase), objective."""

    phase: list[str] = field(default_factory=list)
    sigma: list[float] = field(default_factory=list)
    objective: list[float] = field(default_factory=list)
    edge_weights: np.ndarray | None = None


def spanning_tree(problem: RotationAveragingProblem) -> list[int]:
    """Edge indices of the maximum spanning tree (Kruskal; ties by lower edge index)."""
    parent = {v: v for v in problem.vertices}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    order = sorted(range(len(problem.edges)), key=lambda k: (-problem.edges[k].weight, k))
    tree = []
    for k in order:
        e = problem.edges[k]
        a, b = find(e.i), find(e.j)
        if a != b:
            parent[max(a, b)] = min(a, b)
            tree.append(k)
    if len(tree) != len(parent) - 1:
        raise DisconnectedGraph("view graph is not connected")
    return tree


def init_rotations_mst(problem: RotationAveragingProblem) -> dict[int, np.ndarray]:
    if not problem.edges:
        raise DisconnectedGraph("no edges")
    tree = spanning_tree(problem)
    adj = {v: [] for v in problem.vertices}
    for k in sorted(tree):
        e = problem.edges[k]
        adj[e.i].append((e.j, e.R))
        adj[e.j].append((e.i, e.R.T))
    rots = {problem.anchor: np.eye(3)}
    queue = [problem.anchor]
    while queue:
        u = queue.pop(0)
        for v, Ruv in adj[u]:
            if v not in rots:
                rots[v] = Ruv @ rots[u]
                queue.append(v)
    return rots


def edge_residuals(problem: RotationAveragingProblem, rots) -> np.ndarray:
    return np.array([so3_log(e.R.T @ rots[e.j] @ rots[e.i].T) for e in problem.edges]).reshape(-1, 3)


def gm_objective(problem: RotationAveragingProblem, rots, sigma: float) -> float:
    s = np.sum(edge_residuals(problem, rots) ** 2, axis=1)
    return float(np.sum(robust_loss(RobustKernel("geman_mcclure", sigma), s)[0]))


def _normal_step(problem, rots, res, w, index, n_var):
    rows, cols, vals = [], [], []
    for k, e in enumerate(problem.edges):
        Jr_inv = so3_left_jacobian_inv(-res[k])
        B = Jr_inv @ rots[e.i]
        for v, sign in ((e.j, 1.0), (e.i, -1.0)):
            c = index.get(v)
            if c is None:
                continue
            r, cc = np.meshgrid(np.arange(3 * k, 3 * k + 3), np.arange(3 * c, 3 * c + 3), indexing="ij")
            rows.append(r.ravel())
            cols.append(cc.ravel())
            vals.append((sign * B).ravel())
    J = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(3 * len(problem.edges), n_var)
    )
    W = sp.diags(np.repeat(w, 3))
    H = (J.T @ W @ J).tocsc() + sp.identity(n_var, format="csc") * 1e-12
    g = J.T @ (W @ res.ravel())
    return -spsolve(H, g).reshape(-1, 3)


def _apply(rots, step, index):
    out = dict(rots)
    for v, c in index.items():
        out[v] = rots[v] @ so3_exp(step[c])
    return out


def refine_rotations_irls(
    problem: RotationAveragingProblem,
    init: dict,
    max_iters: int = 100,
    tol: float = 1e-10,
    l1_iters: int = 10,
    trace: RotationTrace | None = None,
) -> dict[int, np.ndarray]:
    """Robust refinement; the anchor rotation is never touched.

    Within each GM scale the step is halved until the objective decreases, so
    accepted iterates are monotone; ``max_iters`` is the budget per scale. Scales run ``sigma, sigma/2, ...`` down to
    ``final_sigma``.
    """
    verts = problem.vertices
    missing = [v for v in verts if v not in init]
    if missing:
        raise ValueError(f"init lacks rotations for {missing}")
    rots = {v: np.asarray(init[v], dtype=float) for v in verts}
    free = [v for v in verts if v != problem.anchor]
    index = {v: k for k, v in enumerate(free)}
    n_var = 3 * len(free)
    trace = trace if trace is not None else RotationTrace()
    if n_var == 0:
        return rots

    def l1(r):
        return float(np.linalg.norm(edge_residuals(problem, r), axis=1).sum())

    cur = l1(rots)
    for _ in range(l1_iters):
        res = edge_residuals(problem, rots)
        w = 1.0 / np.maximum(np.linalg.norm(res, axis=1), 1e-6)
        step = _normal_step(problem, rots, res, w, index, n_var)
        cand = _apply(rots, step, index)
        val = l1(cand)
        if not val < cur:
            break
        rots, cur = cand, val
        trace.phase.append("l1")
        trace.sigma.append(float("nan"))
        trace.objective.append(val)
        if np.abs(step).max() < tol:
            break

    sigmas = []
    s = problem.sigma
    while s > problem.final_sigma * (1 + 1e-12):
        sigmas.append(s)
        s *= 0.5
    sigmas.append(problem.final_sigma)

    for sigma in sigmas:
        kernel = RobustKernel("geman_mcclure", sigma)
        cur = gm_objective(problem, rots, sigma)
        trace.phase.append("gm")
        trace.sigma.append(sigma)
        trace.objective.append(cur)
        for _ in range(max_iters):
            res = edge_residuals(problem, rots)
            _, w = robust_loss(kernel, np.sum(res**2, axis=1))
            step = _normal_step(problem, rots, res, w, index, n_var)
            accepted = False
            for _ in range(20):
                cand = _apply(rots, step, index)
                val = gm_objective(problem, cand, sigma)
                if val <= cur:
                    accepted = True
                    break
                step = step * 0.5
            if not accepted:
                break
            rots, cur = cand, val
            trace.phase.append("gm")
            trace.sigma.append(sigma)
            trace.objective.append(val)
            if np.abs(step).max() < tol:
                break
    res = edge_residuals(problem, rots)
    trace.edge_weights = robust_loss(RobustKernel("geman_mcclure", problem.final_sigma), np.sum(res**2, axis=1))[1]
    return rots


def solve_rotations(problem: RotationAveragingProblem, **kw) -> tuple[dict[int, np.ndarray], RotationTrace]:
    trace = RotationTrace()
    rots = refine_rotations_irls(problem, init_rotations_mst(problem), trace=trace, **kw)
    return rots, trace
