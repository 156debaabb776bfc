import numpy as np
import pytest

from planegbp.gaussians import GaussianInfo
from planegbp.graph import KEYFRAME, LINEAR, POINT, FactorGraph


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_spd(rng, dim, strength=1.0):
    A = rng.normal(size=(dim, dim))
    return A @ A.T + strength * np.eye(dim)


def random_info(rng, dim, strength=1.0) -> GaussianInfo:
    return GaussianInfo(rng.normal(size=dim), random_spd(rng, dim, strength))


def build_linear_graph(rng, n_vars, edges, prior_lam=0.5, noise=0.7):
    """Linear-Gaussian graph over mixed 3/6-dim variables with given edges."""
    g = FactorGraph()
    dims = []
    for i in range(n_vars):
        kind = KEYFRAME if rng.random() < 0.5 else POINT
        d = 6 if kind == KEYFRAME else 3
        dims.append(d)
        mean = rng.normal(size=d)
        lam = np.eye(d) * prior_lam
        g.add_variable(kind, mean, GaussianInfo(lam @ mean, lam))
    for i, j in edges:
        m = dims[i] + dims[j]
        A = rng.normal(size=(m, m))
        z = rng.normal(size=m)
        g.add_factor(LINEAR, (i, j), z, np.full(m, noise), payload={"A": A})
    return g


def random_tree_edges(rng, n_vars):
    return [(int(rng.integers(0, i)), i) for i in range(1, n_vars)]


def bipartite_diameter(graph) -> int:
    """Diameter of the variable/factor incidence graph, in edges."""
    from collections import deque

    adjacency = {("v", vid): [] for vid in graph.variables}
    for fid, f in graph.factors.items():
        adjacency[("f", fid)] = [("v", v) for v in f.adjacency]
        for v in f.adjacency:
            adjacency[("v", v)].append(("f", fid))

    def bfs(src):
        dist = {src: 0}
        q = deque([src])
        far, far_d = src, 0
        while q:
            u = q.popleft()
            for w in adjacency[u]:
                if w not in dist:
                    dist[w] = dist[u] + 1
                    if dist[w] > far_d:
                        far, far_d = w, dist[w]
                    q.append(w)
        return far, far_d

    start = next(iter(adjacency))
    far, _ = bfs(start)
    _, diameter = bfs(far)
    return diameter


def fd_jacobian(fun, x0, eps=1e-6):
    """Central finite differences of fun: R^n -> R^m at x0."""
    x0 = np.asarray(x0, dtype=float)
    f0 = np.asarray(fun(x0))
    J = np.zeros((f0.shape[0], x0.shape[0]))
    for i in range(x0.shape[0]):
        xp = x0.copy()
        xm = x0.copy()
        xp[i] += eps
        xm[i] -= eps
        J[:, i] = (np.asarray(fun(xp)) - np.asarray(fun(xm))) / (2 * eps)
    return J
