"""Ground-truth solvers used as correctness oracles and comparison baselines.

* dense_marginals: exact Gaussian inference by assembling the full joint
  information form and inverting it. The assembly scatters residual/Jacobian
  evaluations directly (it does not go through the message engine), which
  makes it an independent check of propagation results.
* lm_solve: a plain Levenberg-Marquardt loop over the same factor energies,
  for the convergence-behaviour comparisons against propagation.
* structure_cost_probe: symbolic elimination cost of a dense-Schur-style
  solve, quantifying how heterogeneous factors erode the landmark-diagonal
  sparsity that such solvers rely on.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, SingularGaussianError
from .factors import evaluate_factor, tukey_weight, PIXEL_KINDS, _sigma_stack
from .gaussians import BlockLayout, GaussianMoments
from .graph import KEYFRAME, FactorGraph


def build_layout(graph: FactorGraph) -> BlockLayout:
    return BlockLayout.from_dims(
        (vid, graph.variables[vid].dim) for vid in sorted(graph.variables)
    )


def _robust_weight(factor, res, sigma) -> float:
    if factor.robust != "tukey":
        return 1.0
    rho = float(np.sqrt(np.sum((res.value / sigma) ** 2)))
    return tukey_weight(rho, factor.robust_scale)


def assemble_dense(graph: FactorGraph, means: dict, robust: bool = True):
    """Global information form (eta, lam, layout) at the given means."""
    layout = build_layout(graph)
    dim = layout.dim
    eta = np.zeros(dim)
    lam = np.zeros((dim, dim))
    for vid, off, width in layout.blocks:
        node = graph.variables[vid]
        sl = slice(off, off + width)
        eta[sl] += node.prior.eta
        lam[sl, sl] += node.prior.lam

    for factor in graph.factors.values():
        res = evaluate_factor(graph, factor, means)
        sigma = _sigma_stack(factor)
        if not res.valid and factor.kind != "combined_rigid_reprojection":
            continue
        w = _robust_weight(factor, res, sigma) if robust else 1.0
        if w == 0.0:
            continue
        slices = [layout.slice_of(vid) for vid in factor.adjacency]
        jaks = [res.jacobians[vid] for vid in factor.adjacency]
        D = w / sigma**2
        pred = sum(
            j @ res.x0[s] for j, s in zip(jaks, _local_slices(graph, factor))
        ) - res.value
        for j_a, s_a in zip(jaks, slices):
            eta[s_a] += (j_a * D[:, None]).T @ pred
            for j_b, s_b in zip(jaks, slices):
                lam[s_a, s_b] += (j_a * D[:, None]).T @ j_b
    return eta, lam, layout


def _local_slices(graph, factor):
    out, off = [], 0
    for vid in factor.adjacency:
        d = graph.variables[vid].dim
        out.append(slice(off, off + d))
        off += d
    return out


def dense_marginals(graph: FactorGraph, means: dict | None = None, robust: bool = True):
    """Exact per-variable moments by full inversion of the joint precision."""
    if means is None:
        means = {vid: v.mean for vid, v in graph.variables.items()}
    eta, lam, layout = assemble_dense(graph, means, robust=robust)
    try:
        cov = np.linalg.inv(lam)
    except np.linalg.LinAlgError as exc:
        raise SingularGaussianError(
            "joint precision is singular; the graph is gauge-deficient "
            "(consider a strong prior on one keyframe)"
        ) from exc
    mu = cov @ eta
    out = {}
    for vid, off, width in layout.blocks:
        sl = slice(off, off + width)
        out[vid] = GaussianMoments(mu[sl], 0.5 * (cov[sl, sl] + cov[sl, sl].T))
    return out


# ---------------------------------------------------------------------------
# Levenberg-Marquardt
# ---------------------------------------------------------------------------

@dataclass
class LmConfig:
    max_iterations: int = 50
    kernel: str = "huber"  # "huber" | "tukey" | "none"
    kernel_scale: float = 1.345
    lambda_init: float = 1e-4
    lambda_factor: float = 3.0
    lambda_max: float = 1e10
    cost_rel_tol: float = 1e-10


@dataclass
class LmResult:
    means: dict
    trace: list
    converged: bool
    hit_lambda_max: bool = False


def _kernel_cost(kind: str, s: float, c: float) -> float:
    if kind == "none":
        return 0.5 * s * s
    if kind == "huber":
        return 0.5 * s * s if s <= c else c * s - 0.5 * c * c
    if kind == "tukey":
        if s > c:
            return c * c / 6.0
        u = 1.0 - (s / c) ** 2
        return c * c / 6.0 * (1.0 - u**3)
    raise ContractViolation(f"unknown kernel {kind}")


def _kernel_weight(kind: str, s: float, c: float) -> float:
    if kind == "none" or s == 0.0:
        return 1.0
    if kind == "huber":
        return 1.0 if s <= c else c / s
    if kind == "tukey":
        return tukey_weight(s, c)
    raise ContractViolation(f"unknown kernel {kind}")


def _lm_cost(graph, means, kind, scale) -> float:
    cost = 0.0
    for factor in graph.factors.values():
        res = evaluate_factor(graph, factor, means, want_jac=False)
        sigma = _sigma_stack(factor)
        s = float(np.sqrt(np.sum((res.value / sigma) ** 2)))
        k = "none" if factor.kind == "prior" else kind
        cost += _kernel_cost(k, s, scale)
    for node in graph.variables.values():
        d = means[node.id] - _prior_mean(node)
        cost += 0.5 * float(d @ node.prior.lam @ d) if not node.prior.is_zero() else 0.0
    return cost


def _prior_mean(node):
    if node.prior.is_zero():
        return node.mean
    return np.linalg.solve(node.prior.lam, node.prior.eta)


def avg_reprojection_px(graph, means) -> float:
    total, count = 0.0, 0
    for factor in graph.factors.values():
        if factor.kind not in PIXEL_KINDS:
            continue
        res = evaluate_factor(graph, factor, means, want_jac=False)
        v = res.value.reshape(-1, 2)
        if factor.kind == "combined_rigid_reprojection":
            valid = getattr(res, "constituent_valid", np.ones(v.shape[0], bool))
        else:
            valid = np.array([res.valid])
        norms = np.linalg.norm(v, axis=1)
        total += float(np.sum(norms[valid]))
        count += int(np.count_nonzero(valid))
    return total / count if count else 0.0


def lm_solve(graph: FactorGraph, config: LmConfig | None = None) -> LmResult:
    """Levenberg-Marquardt over all factor energies plus variable priors."""
    cfg = config or LmConfig()
    layout = build_layout(graph)
    means = {vid: graph.variables[vid].mean.copy() for vid in graph.variables}
    lam_damp = cfg.lambda_init
    cost = _lm_cost(graph, means, cfg.kernel, cfg.kernel_scale)
    trace = [{"iteration": 0, "cost": cost, "avg_reproj_px": avg_reprojection_px(graph, means)}]
    converged = False
    hit_max = False

    for it in range(1, cfg.max_iterations + 1):
        H = np.zeros((layout.dim, layout.dim))
        g = np.zeros(layout.dim)
        for factor in graph.factors.values():
            res = evaluate_factor(graph, factor, means)
            if not res.valid and factor.kind != "combined_rigid_reprojection":
                continue
            sigma = _sigma_stack(factor)
            s = float(np.sqrt(np.sum((res.value / sigma) ** 2)))
            k = "none" if factor.kind == "prior" else cfg.kernel
            w = _kernel_weight(k, s, cfg.kernel_scale)
            if w == 0.0:
                continue
            D = w / sigma**2
            slices = [layout.slice_of(vid) for vid in factor.adjacency]
            jaks = [res.jacobians[vid] for vid in factor.adjacency]
            # gradient of 1/2 w |v|^2 wrt x is w J^T S^-1 v with J = dv/dx
            for j_a, s_a in zip(jaks, slices):
                g[s_a] += (j_a * D[:, None]).T @ res.value
                for j_b, s_b in zip(jaks, slices):
                    H[s_a, s_b] += (j_a * D[:, None]).T @ j_b
        for vid, off, width in layout.blocks:
            node = graph.variables[vid]
            if node.prior.is_zero():
                continue
            sl = slice(off, off + width)
            H[sl, sl] += node.prior.lam
            g[sl] += node.prior.lam @ (means[vid] - _prior_mean(node))

        accepted = False
        while not accepted:
            damp = H + lam_damp * np.diag(np.maximum(np.diag(H), 1e-12))
            try:
                delta = np.linalg.solve(damp, -g)
            except np.linalg.LinAlgError:
                delta = None
            if delta is not None and np.all(np.isfinite(delta)):
                cand = {
                    vid: means[vid] + delta[layout.slice_of(vid)] for vid in means
                }
                cand_cost = _lm_cost(graph, cand, cfg.kernel, cfg.kernel_scale)
                if cand_cost <= cost:
                    means = cand
                    rel = (cost - cand_cost) / max(cost, 1e-300)
                    cost = cand_cost
                    lam_damp = max(lam_damp / cfg.lambda_factor, 1e-12)
                    accepted = True
                    trace.append({
                        "iteration": it, "cost": cost,
                        "avg_reproj_px": avg_reprojection_px(graph, means),
                    })
                    if rel < cfg.cost_rel_tol:
                        converged = True
                    break
            lam_damp *= cfg.lambda_factor
            if lam_damp > cfg.lambda_max:
                hit_max = True
                break
        if hit_max or converged:
            break

    return LmResult(means, trace, converged, hit_max)


# ---------------------------------------------------------------------------
# Structure probe
# ---------------------------------------------------------------------------

def structure_cost_probe(graph: FactorGraph) -> dict:
    """Symbolic cost of a dense-Schur-style solve on this graph.

    Eliminates every non-keyframe variable (natural order) from the variable
    adjacency graph, charging |clique|^2 block operations per elimination and
    counting fill edges; also reports the density of the reduced keyframe
    system. Heterogeneous factors couple landmarks to each other, so these
    counts grow much faster than the factor count.
    """
    adj: dict[int, set] = {vid: set() for vid in graph.variables}
    for factor in graph.factors.values():
        ids = factor.adjacency
        for a in ids:
            for b in ids:
                if a != b:
                    adj[a].add(b)
    landmark_offdiag = sum(
        1
        for a in adj
        for b in adj[a]
        if a < b
        and graph.variables[a].kind != KEYFRAME
        and graph.variables[b].kind != KEYFRAME
    )
    block_ops = 0
    fill_edges = 0
    is_landmark = {vid: graph.variables[vid].kind != KEYFRAME for vid in adj}
    order = sorted(vid for vid in adj if is_landmark[vid])
    live = {vid: set(n) for vid, n in adj.items()}
    for vid in order:
        nbrs = [n for n in live[vid] if n != vid]
        block_ops += len(nbrs) ** 2
        for i, a in enumerate(nbrs):
            live[a].discard(vid)
            for b in nbrs[i + 1 :]:
                if b not in live[a]:
                    live[a].add(b)
                    live[b].add(a)
                    # keyframe-pair fill is the normal Schur-complement
                    # densification; landmark-landmark fill is what the
                    # block-diagonal trick of BA solvers relies on avoiding
                    if is_landmark[a] and is_landmark[b]:
                        fill_edges += 1
        del live[vid]
    reduced_nnz = sum(1 for a in live for b in live[a] if a < b and b in live)
    return {
        "landmark_offdiag_blocks": landmark_offdiag,
        "elimination_block_ops": block_ops,
        "fill_edges": fill_edges,
        "reduced_camera_offdiag_blocks": reduced_nnz,
    }
